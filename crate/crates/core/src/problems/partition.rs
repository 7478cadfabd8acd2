//! Labeled datasets and the class-concentrated non-IID split.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synthetic::logistic_client;
use super::FederatedProblem;
use crate::error::{FedError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub label: i64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub rows: Vec<LabeledRow>,
}

impl LabeledDataset {
    pub fn new(rows: Vec<LabeledRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.features.len();
            if let Some(r) = rows.iter().find(|r| r.features.len() != d) {
                return Err(FedError::DimensionMismatch { expected: d, found: r.features.len() });
            }
        }
        Ok(LabeledDataset { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads the `label,f0,f1,...` format.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.get(0) != Some("label") {
            return Err(FedError::Config(format!("{}: first column must be `label`", path.display())));
        }
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let bad = |what: &str| FedError::Config(format!("{}: row {}: invalid {what}", path.display(), line + 1));
            let label = record.get(0).unwrap_or("").trim().parse::<i64>().map_err(|_| bad("label"))?;
            let features = record
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("feature"))?;
            rows.push(LabeledRow { label, features });
        }
        Self::new(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let d = self.rows.first().map_or(0, |r| r.features.len());
        let mut header = vec!["label".to_string()];
        header.extend((0..d).map(|i| format!("f{i}")));
        writer.write_record(&header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let mut rec = vec![r.label.to_string()];
            rec.extend(r.features.iter().map(|v| format!("{v:e}")));
            writer.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| FedError::io(path, e))
    }

    /// Binary logistic clients, one per partition, with `positive_class`
    /// mapped to label 1 and every other class to 0.
    pub fn logistic_problem(parts: &[LabeledDataset], positive_class: i64, l2: f64, penalty: f64) -> Result<FederatedProblem> {
        let clients = parts
            .iter()
            .map(|p| {
                let rows = p.rows.iter().map(|r| r.features.clone()).collect();
                let labels = p.rows.iter().map(|r| if r.label == positive_class { 1.0 } else { 0.0 }).collect();
                logistic_client(rows, labels, l2, penalty)
            })
            .collect::<Result<Vec<_>>>()?;
        FederatedProblem::new(clients)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> FedError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::io(path, io),
        other => FedError::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Class-concentration split: the client owning a class receives
/// `⌊het_fraction · n_c⌋` of its samples and the other clients share the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub het_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Classes are taken in ascending label order; class `c` is owned by client
/// `c mod num_clients`. Leftover samples after the equal split go to the
/// non-owners in a rotation that starts at a different client per class.
pub fn partition_dataset(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    if data.is_empty() {
        return Err(FedError::usage("cannot partition an empty dataset"));
    }
    let clients = spec.num_clients;
    if clients == 0 {
        return Err(FedError::usage("num_clients must be positive"));
    }
    if !(spec.het_fraction > 0.0 && spec.het_fraction <= 1.0) {
        return Err(FedError::usage(format!("het_fraction must lie in (0, 1], got {}", spec.het_fraction)));
    }
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.rows.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (ci, idx) in by_class.values_mut().enumerate() {
        let mut rng = rng::stream(spec.seed, rng::SERVER, rng::INIT_ROUND, ci as u64);
        idx.shuffle(&mut rng);
        let owner = ci % clients;
        let n = idx.len();
        let own = if clients == 1 { n } else { (spec.het_fraction * n as f64).floor() as usize };
        assigned[owner].extend_from_slice(&idx[..own]);
        let rest = &idx[own..];
        if rest.is_empty() {
            continue;
        }
        let others: Vec<usize> = (1..clients).map(|j| (owner + j) % clients).collect();
        let base = rest.len() / others.len();
        let extra = rest.len() % others.len();
        let mut pos = 0;
        for j in 0..others.len() {
            let client = others[(j + ci) % others.len()];
            let take = base + usize::from(j < extra);
            assigned[client].extend_from_slice(&rest[pos..pos + take]);
            pos += take;
        }
    }
    Ok(assigned
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            LabeledDataset { rows: idx.into_iter().map(|i| data.rows[i].clone()).collect() }
        })
        .collect())
}
