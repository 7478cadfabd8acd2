//! Self-check suites behind `fedda verify`.
//!
//! The prox oracle here deliberately shares no code with [`crate::prox`]: it
//! minimizes the objective by projected gradient descent with its own
//! Euclidean projections, plus a feasible grid scan in one and two dimensions.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use super::config::{AdaptiveConfig, BatchConfig, ScheduleConfig};
use super::{ExperimentConfig, MetricsRow};
use crate::error::{FedError, Result};
use crate::federation::run_training;
use crate::linalg::{DiagonalMetric, ParamVector};
use crate::problems::{BatchSize, QuadraticSpec};
use crate::prox::{kkt_residual, prox_objective, solve_prox, ConstraintSet, ProxProblem};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    ProxOracle,
    Lemmas,
    Rate,
}

impl FromStr for Suite {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prox-oracle" => Ok(Suite::ProxOracle),
            "lemmas" => Ok(Suite::Lemmas),
            "rate" => Ok(Suite::Rate),
            other => Err(FedError::usage(format!("unknown suite `{other}` (expected prox-oracle, lemmas or rate)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::ProxOracle => "prox-oracle",
            Suite::Lemmas => "lemmas",
            Suite::Rate => "rate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub lines: Vec<String>,
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    match suite {
        Suite::ProxOracle => prox_oracle(1000, 7),
        Suite::Lemmas => lemma_suite(),
        Suite::Rate => rate_suite(),
    }
}

// ---------------------------------------------------------------------------
// prox oracle

/// A random proximal step; `kind` picks the set (0 box, 1 L2, 2 L1, 3 none).
#[derive(Debug, Clone)]
pub struct RandomProx {
    pub z: ParamVector,
    pub x0: ParamVector,
    pub h: DiagonalMetric,
    pub lambda: f64,
    pub set: ConstraintSet,
}

impl RandomProx {
    pub fn generate(seed: u64, case: u64, kind: usize) -> Result<Self> {
        let mut r = rng::stream(seed, 0, 0, case);
        let d = r.random_range(1..=5usize);
        let vec = |scale: f64, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| r.random_range(-scale..scale)).collect()
        };
        let z = ParamVector::new(vec(4.0, &mut r))?;
        let x0 = ParamVector::new(vec(3.0, &mut r))?;
        let diag: Vec<f64> = (0..d).map(|_| 10f64.powf(r.random_range(-1.0..1.0))).collect();
        let h = DiagonalMetric::diagonal(diag, 1e-3)?;
        let lambda = r.random_range(0.1..5.0);
        let set = match kind % 4 {
            0 => {
                let lo: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..0.5)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + r.random_range(0.0..2.5)).collect();
                ConstraintSet::boxed(lo, hi)?
            }
            1 => ConstraintSet::l2_ball(ParamVector::new(vec(1.0, &mut r))?, r.random_range(0.1..3.0))?,
            2 => ConstraintSet::l1_ball(ParamVector::new(vec(1.0, &mut r))?, r.random_range(0.1..3.0))?,
            _ => ConstraintSet::Unconstrained,
        };
        Ok(RandomProx { z, x0, h, lambda, set })
    }

    pub fn problem(&self) -> ProxProblem<'_> {
        ProxProblem::new(&self.z, &self.x0, &self.h, self.lambda, &self.set)
    }
}

fn objective(p: &RandomProx, x: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| -x[i] * p.z[i] + p.h.entry(i) * (x[i] - p.x0[i]).powi(2) / (2.0 * p.lambda))
        .sum()
}

/// Euclidean projection, written independently of the library solvers.
fn euclidean_projection(set: &ConstraintSet, y: &[f64]) -> Vec<f64> {
    match set {
        ConstraintSet::Unconstrained => y.to_vec(),
        ConstraintSet::Box { lo, hi } => y.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect(),
        ConstraintSet::L2Ball { center, radius } => {
            let diff: Vec<f64> = y.iter().zip(center.iter()).map(|(a, c)| a - c).collect();
            let n = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if n > *radius { radius / n } else { 1.0 };
            diff.iter().zip(center.iter()).map(|(v, c)| c + s * v).collect()
        }
        ConstraintSet::L1Ball { center, radius } => {
            let diff: Vec<f64> = y.iter().zip(center.iter()).map(|(a, c)| a - c).collect();
            if diff.iter().map(|v| v.abs()).sum::<f64>() <= *radius {
                return y.to_vec();
            }
            // sort-based simplex projection of |diff|
            let mut u: Vec<f64> = diff.iter().map(|v| v.abs()).collect();
            u.sort_by(|a, b| b.total_cmp(a));
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (j, &uj) in u.iter().enumerate() {
                cum += uj;
                let t = (cum - radius) / (j as f64 + 1.0);
                if uj > t {
                    theta = t;
                }
            }
            diff.iter()
                .zip(center.iter())
                .map(|(v, c)| c + v.signum() * (v.abs() - theta).max(0.0))
                .collect()
        }
    }
}

/// Projected gradient descent with step `λ / max H`.
fn pgd(p: &RandomProx) -> Vec<f64> {
    let d = p.x0.dim();
    let hmax = (0..d).map(|i| p.h.entry(i)).fold(0.0, f64::max);
    let step = p.lambda / hmax;
    let mut x = euclidean_projection(&p.set, p.x0.as_slice());
    for _ in 0..200_000 {
        let y: Vec<f64> = (0..d).map(|i| x[i] - step * (-p.z[i] + p.h.entry(i) * (x[i] - p.x0[i]) / p.lambda)).collect();
        let next = euclidean_projection(&p.set, &y);
        let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if moved < 1e-15 {
            break;
        }
    }
    x
}

fn inside(set: &ConstraintSet, x: &[f64]) -> bool {
    match set {
        ConstraintSet::Unconstrained => true,
        ConstraintSet::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h),
        ConstraintSet::L2Ball { center, radius } => {
            x.iter().zip(center.iter()).map(|(a, c)| (a - c).powi(2)).sum::<f64>() <= radius * radius
        }
        ConstraintSet::L1Ball { center, radius } => x.iter().zip(center.iter()).map(|(a, c)| (a - c).abs()).sum::<f64>() <= *radius,
    }
}

/// Best feasible grid point for `d ≤ 2`.
fn grid(p: &RandomProx) -> Option<f64> {
    let d = p.x0.dim();
    if d > 2 {
        return None;
    }
    const N: usize = 401;
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|i| match &p.set {
            ConstraintSet::Box { lo, hi } => (lo[i], hi[i]),
            ConstraintSet::L2Ball { center, radius } | ConstraintSet::L1Ball { center, radius } => {
                (center[i] - radius, center[i] + radius)
            }
            ConstraintSet::Unconstrained => {
                let y = p.x0[i] + p.lambda * p.z[i] / p.h.entry(i);
                (y - 1.0, y + 1.0)
            }
        })
        .collect();
    let at = |i: usize, j: usize| bounds[i].0 + (bounds[i].1 - bounds[i].0) * j as f64 / (N - 1) as f64;
    let mut best = f64::INFINITY;
    let second = if d == 2 { N } else { 1 };
    for a in 0..N {
        for b in 0..second {
            let x: Vec<f64> = if d == 2 { vec![at(0, a), at(1, b)] } else { vec![at(0, a)] };
            if inside(&p.set, &x) {
                best = best.min(objective(p, &x));
            }
        }
    }
    best.is_finite().then_some(best)
}

/// Oracle optimum: the better of projected gradient descent and the grid.
pub fn oracle_value(p: &RandomProx) -> f64 {
    let v = objective(p, &pgd(p));
    grid(p).map_or(v, |g| g.min(v))
}

pub fn prox_oracle(cases: u64, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt: f64 = 0.0;
    let mut failures = Vec::new();
    for case in 0..cases {
        let p = RandomProx::generate(seed, case, case as usize)?;
        let prob = p.problem();
        let x = solve_prox(&prob)?;
        let value = prox_objective(&prob, &x)?;
        let gap = value - oracle_value(&p);
        let kkt = kkt_residual(&prob, &x)?;
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(kkt);
        if gap > 1e-6 || kkt > 1e-8 {
            failures.push(format!("case {case} ({:?}): objective gap {gap:e}, kkt {kkt:e}", p.set));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut lines = vec![format!(
        "{cases} problems: worst objective excess {worst_gap:e}, worst kkt residual {worst_kkt:e}, {secs:.2}s"
    )];
    let passed = failures.is_empty();
    lines.extend(failures.into_iter().take(10));
    Ok(SuiteReport { name: Suite::ProxOracle.to_string(), passed, lines })
}

// ---------------------------------------------------------------------------
// lemma and rate runs

/// Heterogeneous stochastic quadratic, K = 8, I = 5, theorem-mode steps.
pub fn lemma_config(rounds: usize) -> ExperimentConfig {
    let mut c = base_config(8, 5, rounds);
    c.problem = super::config::ProblemConfig::Quadratic(QuadraticSpec {
        dim: 10,
        curvature: [0.5, 2.0],
        shared_curvature: false,
        heterogeneity: 1.0,
        noise: 0.5,
        samples: 100,
    });
    c.batch = BatchConfig { init: BatchSize::Samples(25), local: BatchSize::Samples(4) };
    c
}

/// Heterogeneous least squares with a diagonal design (so `L` is exact),
/// K = 8, I = 5, theorem-mode steps, initial minibatch of `I²` samples.
pub fn rate_config(rounds: usize) -> ExperimentConfig {
    let mut c = base_config(8, 5, rounds);
    c.problem = super::config::ProblemConfig::Quadratic(QuadraticSpec {
        dim: 10,
        curvature: [0.5, 1.0],
        shared_curvature: false,
        heterogeneity: 1.0,
        noise: 0.2,
        samples: 200,
    });
    c.adaptive = AdaptiveConfig { epsilon: 1.0, ..AdaptiveConfig::default() };
    c.batch = BatchConfig { init: BatchSize::Samples(25), local: BatchSize::Samples(4) };
    c
}

fn base_config(clients: usize, local_steps: usize, rounds: usize) -> ExperimentConfig {
    let text = format!(
        "clients = {clients}\nlocal_steps = {local_steps}\nrounds = {rounds}\nseed = 11\n\n[problem]\nkind = \"quadratic\"\ndim = 1\n"
    );
    let mut c = ExperimentConfig::parse(&text).expect("built-in config parses");
    c.schedule = ScheduleConfig::Theorem { rho: None, lipschitz: None };
    c.output.svg = None;
    c
}

pub fn lemma_suite() -> Result<SuiteReport> {
    let table = run_training(&lemma_config(200))?;
    let s = &table.lemma;
    let mut lines = vec![format!(
        "{} inequality checks over {} steps, {} violations, worst margin {:e}",
        s.checks,
        table.rows.len(),
        s.violations,
        s.worst_margin
    )];
    if let Some(v) = &s.first_violation {
        lines.push(format!("first violation: {v}"));
    }
    Ok(SuiteReport { name: Suite::Lemmas.to_string(), passed: s.checks > 0 && s.violations == 0, lines })
}

/// Mean of `measure_g` over steps `t ≥ T/2` among the first `T` rows.
pub fn trailing_mean(rows: &[MetricsRow], horizon: usize) -> f64 {
    let tail = &rows[horizon / 2..horizon];
    tail.iter().map(|r| r.measure_g).sum::<f64>() / tail.len() as f64
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub const RATE_HORIZONS: [usize; 2] = [2_000, 16_000];

/// Runs the rate configuration for each horizon and fits the slope.
pub fn rate_slope() -> Result<(f64, Vec<(f64, f64)>)> {
    let mut points = Vec::new();
    for &t in &RATE_HORIZONS {
        let cfg = rate_config(t / 5);
        let table = run_training(&cfg)?;
        points.push((t as f64, trailing_mean(&table.rows, t)));
    }
    Ok((loglog_slope(&points), points))
}

pub fn rate_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let (slope, points) = rate_slope()?;
    let mut lines: Vec<String> = points.iter().map(|(t, g)| format!("T = {t}: trailing mean measure {g:e}")).collect();
    lines.push(format!("slope {slope:.3} (threshold -0.5), {:.1}s", start.elapsed().as_secs_f64()));
    Ok(SuiteReport { name: Suite::Rate.to_string(), passed: slope <= -0.5, lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_projection_lands_on_sphere() {
        let set = ConstraintSet::l1_ball(ParamVector::zeros(3), 1.0).unwrap();
        let x = euclidean_projection(&set, &[3.0, -1.0, 0.2]);
        assert!((x.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(x, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 8.0].iter().map(|&t: &f64| (t, 3.0 * t.powf(-0.7))).collect();
        assert!((loglog_slope(&pts) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn suite_names_parse() {
        for s in [Suite::ProxOracle, Suite::Lemmas, Suite::Rate] {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn small_oracle_run_passes() {
        let r = prox_oracle(40, 3).unwrap();
        assert!(r.passed, "{:?}", r.lines);
    }
}
