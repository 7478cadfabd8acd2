//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptivity::{AdaptiveKind, AdaptiveRule, ScheduleMode, StepSchedule};
use crate::error::{FedError, Result};
use crate::estimators::{AlphaSource, EstimatorKind, EstimatorRule};
use crate::federation::{Baseline, FedDaParams};
use crate::linalg::ParamVector;
use crate::problems::{
    partition_dataset, BatchSize, FederatedProblem, LabeledDataset, LogisticSpec, PartitionSpec, QuadraticSpec,
    SparseRegressionSpec,
};
use crate::prox::ConstraintSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// General dual-averaging path; the variant follows `estimator.kind` and `adaptive.kind`.
    Fedda,
    /// Single-local-step path with the prox taken on the server.
    FeddaI1,
    Fedavg,
    Fedadam,
    Fedcm,
}

impl Algorithm {
    pub fn is_baseline(self) -> bool {
        matches!(self, Algorithm::Fedavg | Algorithm::Fedadam | Algorithm::Fedcm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    #[default]
    InMemory,
    Socket,
}

/// CSV dataset split across clients by class concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub positive_class: i64,
    pub het_fraction: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    SparseRegression(SparseRegressionSpec),
    Logistic(LogisticSpec),
    Dataset(DatasetConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Step sizes from the analysis. `rho` defaults to `adaptive.epsilon` and
    /// `lipschitz` to the analytic bound of the problem.
    Theorem {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
    Practical { eta0: f64, w: f64, c: f64 },
    Constant {
        eta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
    },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Theorem { rho: None, lipschitz: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_estimator")]
    pub kind: EstimatorKind,
    /// Constant mixing weight; when absent `α = c η²` with the schedule's `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Mvr
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { kind: EstimatorKind::Mvr, alpha: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    #[serde(default = "default_adaptive")]
    pub kind: AdaptiveKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_adaptive() -> AdaptiveKind {
    AdaptiveKind::Elementwise
}

fn default_beta() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    0.01
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { kind: default_adaptive(), beta: default_beta(), epsilon: default_epsilon() }
    }
}

/// Constraint set with scalar bounds; centers default to the origin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintConfig {
    #[default]
    Unconstrained,
    Box { lo: f64, hi: f64 },
    L2Ball {
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    L1Ball {
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
}

impl ConstraintConfig {
    pub fn build(&self, dim: usize) -> Result<ConstraintSet> {
        let center = |c: &Option<Vec<f64>>| match c {
            Some(v) => ParamVector::new(v.clone()),
            None => Ok(ParamVector::zeros(dim)),
        };
        match self {
            ConstraintConfig::Unconstrained => Ok(ConstraintSet::Unconstrained),
            ConstraintConfig::Box { lo, hi } => ConstraintSet::boxed(vec![*lo; dim], vec![*hi; dim]),
            ConstraintConfig::L2Ball { radius, center: c } => ConstraintSet::l2_ball(center(c)?, *radius),
            ConstraintConfig::L1Ball { radius, center: c } => ConstraintSet::l1_ball(center(c)?, *radius),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    /// Per-client minibatch for the initial estimate.
    #[serde(default = "default_batch")]
    pub init: BatchSize,
    /// Per-client minibatch for every local step.
    #[serde(default = "default_batch")]
    pub local: BatchSize,
}

fn default_batch() -> BatchSize {
    BatchSize::Samples(16)
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { init: default_batch(), local: default_batch() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_csv")]
    pub csv: String,
    #[serde(default = "default_svg", skip_serializing_if = "Option::is_none")]
    pub svg: Option<String>,
    #[serde(default = "default_svg_fields")]
    pub svg_fields: Vec<String>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_csv() -> String {
    "metrics.csv".into()
}

fn default_svg() -> Option<String> {
    Some("metrics.svg".into())
}

fn default_svg_fields() -> Vec<String> {
    vec!["measure_g".into(), "loss".into()]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir(), csv: default_csv(), svg: default_svg(), svg_fields: default_svg_fields() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// `K`.
    pub clients: usize,
    /// `r`; all clients when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participating: Option<usize>,
    /// `I`.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    /// `E`.
    pub rounds: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub shared_client_rng: bool,
    #[serde(default)]
    pub trace_clients: bool,
    #[serde(default = "default_density")]
    pub density_threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub adaptive: AdaptiveConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Fedda
}

fn default_local_steps() -> usize {
    1
}

fn default_lambda() -> f64 {
    1.0
}

fn default_density() -> f64 {
    0.01
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FedError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(FedError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| FedError::Config(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides::<&str>(text, &[])
    }

    pub fn parse_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| FedError::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| FedError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::parse_with_overrides(&text, overrides).map_err(|e| match e {
            FedError::Config(m) => FedError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::Config(e.to_string()))
    }

    pub fn participating(&self) -> usize {
        self.participating.unwrap_or(self.clients)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        let r = self.participating();
        if r == 0 || r > self.clients {
            return bad(format!("participating must lie in [1, clients], got {r}"));
        }
        if self.local_steps == 0 {
            return bad("local_steps must be at least 1".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.density_threshold >= 0.0) {
            return bad("density_threshold must be nonnegative".into());
        }
        self.batch.init.validate()?;
        self.batch.local.validate()?;
        AdaptiveRule::new(self.adaptive.kind, self.adaptive.beta, self.adaptive.epsilon)?;
        if let Some(a) = self.estimator.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("estimator.alpha must lie in (0, 1], got {a}"));
            }
        }
        match self.algorithm {
            a if a.is_baseline() => {
                let b = self
                    .baseline
                    .ok_or_else(|| FedError::Config(format!("algorithm {a:?} needs a [baseline] section")))?;
                let matches = matches!(
                    (a, b),
                    (Algorithm::Fedavg, Baseline::FedAvg { .. })
                        | (Algorithm::Fedadam, Baseline::FedAdam { .. })
                        | (Algorithm::Fedcm, Baseline::FedCm { .. })
                );
                if !matches {
                    return bad(format!("baseline.kind does not match algorithm {a:?}"));
                }
                b.validate()?;
            }
            Algorithm::FeddaI1 => {
                if self.local_steps != 1 || r != self.clients {
                    return bad("fedda-i1 requires local_steps = 1 and full participation".into());
                }
            }
            _ => {}
        }
        if let ScheduleConfig::Constant { eta, .. } = self.schedule {
            if !(eta > 0.0) {
                return bad(format!("schedule.eta must be positive, got {eta}"));
            }
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<FederatedProblem> {
        let k = self.clients;
        match &self.problem {
            ProblemConfig::Quadratic(s) => s.generate(k, self.seed),
            ProblemConfig::SparseRegression(s) => Ok(s.generate(k, self.seed)?.0),
            ProblemConfig::Logistic(s) => s.generate(k, self.seed),
            ProblemConfig::Dataset(d) => {
                let data = LabeledDataset::read_csv(&d.path)?;
                let spec = PartitionSpec { num_clients: k, het_fraction: d.het_fraction, seed: self.seed };
                let parts = partition_dataset(&data, &spec)?;
                LabeledDataset::logistic_problem(&parts, d.positive_class, d.l2, d.penalty)
            }
        }
    }

    pub fn initial_point(&self, dim: usize) -> Result<ParamVector> {
        match &self.x0 {
            Some(v) if v.len() != dim => Err(FedError::DimensionMismatch { expected: dim, found: v.len() }),
            Some(v) => ParamVector::new(v.clone()),
            None => Ok(ParamVector::zeros(dim)),
        }
    }

    pub fn step_schedule(&self, problem: &FederatedProblem) -> Result<StepSchedule> {
        let (i, k) = (self.local_steps, self.clients);
        match self.schedule {
            ScheduleConfig::Theorem { rho, lipschitz } => StepSchedule::theorem(
                rho.unwrap_or(self.adaptive.epsilon),
                self.lambda,
                lipschitz.unwrap_or_else(|| problem.lipschitz()),
                i,
                k,
            ),
            ScheduleConfig::Practical { eta0, w, c } => StepSchedule::new(ScheduleMode::Practical { eta0, w, c }, i, k),
            ScheduleConfig::Constant { eta, .. } => StepSchedule::new(ScheduleMode::Constant { eta }, i, k),
        }
    }

    pub fn fedda_params(&self, problem: &FederatedProblem) -> Result<FedDaParams> {
        let schedule = self.step_schedule(problem)?;
        let alpha = match (self.estimator.alpha, self.schedule, schedule.alpha_constant()) {
            (Some(a), _, _) => AlphaSource::Constant(a),
            (None, ScheduleConfig::Constant { c: Some(c), .. }, _) => AlphaSource::Schedule { c },
            (None, _, Some(c)) => AlphaSource::Schedule { c },
            (None, _, None) => {
                return Err(FedError::Config(
                    "constant schedule needs estimator.alpha or schedule.c".into(),
                ))
            }
        };
        Ok(FedDaParams {
            lambda: self.lambda,
            set: self.constraint.build(problem.dim())?,
            estimator: EstimatorRule::new(self.estimator.kind, alpha)?,
            adaptive: AdaptiveRule::new(self.adaptive.kind, self.adaptive.beta, self.adaptive.epsilon)?,
            schedule,
            batch: self.batch.local,
            seed: self.seed,
            shared_client_rng: self.shared_client_rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
clients = 4
rounds = 10

[problem]
kind = "quadratic"
dim = 3
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.algorithm, Algorithm::Fedda);
        assert_eq!(c.local_steps, 1);
        assert_eq!(c.density_threshold, 0.01);
        assert_eq!(c.adaptive.epsilon, 0.01);
        assert_eq!(c.participating(), 4);
        assert_eq!(c.schedule, ScheduleConfig::Theorem { rho: None, lipschitz: None });
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse(&format!("leraning_rate = 0.1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("leraning_rate"), "{err}");
        let err = ExperimentConfig::parse(&format!("{MINIMAL}curvatur = [1.0, 2.0]\n")).unwrap_err();
        assert!(err.to_string().contains("curvatur"), "{err}");
    }

    #[test]
    fn round_trip() {
        let text = format!(
            "{MINIMAL}\n[schedule]\nmode = \"practical\"\neta0 = 0.01\nw = 100.0\nc = 50.0\n\n[constraint]\nkind = \"l1-ball\"\nradius = 2.0\n\n[batch]\ninit = \"full\"\nlocal = 8\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(c.batch.init, BatchSize::FULL);
        assert_eq!(c.batch.local, BatchSize::Samples(8));
        let again = ExperimentConfig::parse(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::parse_with_overrides(
            MINIMAL,
            &["rounds=3", "adaptive.beta=0.5", "schedule.mode=constant", "schedule.eta=0.2", "transport=socket"],
        )
        .unwrap();
        assert_eq!(c.rounds, 3);
        assert_eq!(c.adaptive.beta, 0.5);
        assert_eq!(c.schedule, ScheduleConfig::Constant { eta: 0.2, c: None });
        assert_eq!(c.transport, TransportKind::Socket);
        assert!(ExperimentConfig::parse_with_overrides(MINIMAL, &["rounds"]).is_err());
    }

    #[test]
    fn baselines_need_their_section() {
        let err = ExperimentConfig::parse(&format!("algorithm = \"fedavg\"\n{MINIMAL}")).unwrap_err();
        assert!(matches!(err, FedError::Config(_)));
        let ok = format!("algorithm = \"fedcm\"\n{MINIMAL}\n[baseline]\nkind = \"fedcm\"\nlr = 0.1\nalpha = 0.5\n");
        ExperimentConfig::parse(&ok).unwrap();
    }
}
