//! Dense vectors and the diagonal positive-definite metric.
//!
//! Every primal iterate, dual accumulator and gradient estimate in the
//! toolkit is a [`ParamVector`]. The adaptive matrix is a [`DiagonalMetric`],
//! either a full diagonal or a scalar multiple of the identity, with a strict
//! positive floor on every effective entry.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Dense real vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(FedError::DimensionMismatch { expected, found });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FedError::usage(format!(
            "non-finite entry {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(ParamVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        ParamVector(vec![value; dim])
    }

    /// Builds a vector without the finiteness check. Callers guarantee the
    /// entries come from finite arithmetic.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite entry");
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        check_dims(self.dim(), other.dim())?;
        let out: Vec<f64> = self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&out)?;
        Ok(ParamVector(out))
    }

    /// `a * x + y`, elementwise.
    pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        x.zip_map(y, |xi, yi| a * xi + yi)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamVector {
        ParamVector(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn dist(&self, other: &ParamVector) -> Result<f64> {
        Ok(self.dist_sq(other)?.sqrt())
    }

    /// Arithmetic mean of a nonempty list of equal-dimension vectors.
    ///
    /// Computed as `v0 + (1/n) Σ (v_k - v0)` in list order, so a list of
    /// identical vectors averages to exactly that vector.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a ParamVector>) -> Result<ParamVector> {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FedError::usage("mean of an empty vector list"))?;
        let mut acc = vec![0.0; first.dim()];
        let mut count = 1usize;
        for v in iter {
            check_dims(first.dim(), v.dim())?;
            for ((a, &x), &x0) in acc.iter_mut().zip(&v.0).zip(&first.0) {
                *a += x - x0;
            }
            count += 1;
        }
        let n = count as f64;
        let out: Vec<f64> = first.0.iter().zip(&acc).map(|(&x0, &a)| x0 + a / n).collect();
        check_finite(&out)?;
        Ok(ParamVector(out))
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MetricDiag {
    Full(Vec<f64>),
    Scalar(f64),
}

/// Diagonal positive-definite metric `H` with floor `ε`.
///
/// Effective entries are `max(raw, ε)`, so `H ⪰ εI` holds no matter what the
/// update rule produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMetric {
    diag: MetricDiag,
    floor: f64,
}

impl DiagonalMetric {
    pub fn diagonal(diag: Vec<f64>, floor: f64) -> Result<Self> {
        Self::check_floor(floor)?;
        check_finite(&diag)?;
        let diag = diag.into_iter().map(|h| h.max(floor)).collect();
        Ok(DiagonalMetric {
            diag: MetricDiag::Full(diag),
            floor,
        })
    }

    pub fn scalar(value: f64, floor: f64) -> Result<Self> {
        Self::check_floor(floor)?;
        check_finite(&[value])?;
        Ok(DiagonalMetric {
            diag: MetricDiag::Scalar(value.max(floor)),
            floor,
        })
    }

    /// `I` with floor 1.
    pub fn identity() -> Self {
        DiagonalMetric {
            diag: MetricDiag::Scalar(1.0),
            floor: 1.0,
        }
    }

    fn check_floor(floor: f64) -> Result<()> {
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(FedError::usage(format!("metric floor must be positive, got {floor}")));
        }
        Ok(())
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self.diag, MetricDiag::Scalar(_))
    }

    /// Dimension of a full diagonal; `None` in scalar mode.
    pub fn dim(&self) -> Option<usize> {
        match &self.diag {
            MetricDiag::Full(d) => Some(d.len()),
            MetricDiag::Scalar(_) => None,
        }
    }

    #[inline]
    pub fn entry(&self, i: usize) -> f64 {
        match &self.diag {
            MetricDiag::Full(d) => d[i],
            MetricDiag::Scalar(s) => *s,
        }
    }

    /// Smallest effective diagonal entry, the constant `ρ` with `H ⪰ ρI`.
    pub fn min_eigenvalue(&self) -> f64 {
        match &self.diag {
            MetricDiag::Full(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
            MetricDiag::Scalar(s) => *s,
        }
    }

    pub fn max_eigenvalue(&self) -> f64 {
        match &self.diag {
            MetricDiag::Full(d) => d.iter().copied().fold(0.0, f64::max),
            MetricDiag::Scalar(s) => *s,
        }
    }

    /// The effective diagonal expanded to `dim` entries.
    pub fn to_diag_vec(&self, dim: usize) -> Vec<f64> {
        (0..dim).map(|i| self.entry(i)).collect()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.dim() {
            Some(d) => check_dims(d, dim),
            None => Ok(()),
        }
    }

    /// `H v`.
    pub fn apply(&self, v: &ParamVector) -> Result<ParamVector> {
        self.check_dim(v.dim())?;
        let out: Vec<f64> = v.iter().enumerate().map(|(i, x)| self.entry(i) * x).collect();
        check_finite(&out)?;
        Ok(ParamVector(out))
    }

    /// `H⁻¹ v`.
    pub fn inverse_apply(&self, v: &ParamVector) -> Result<ParamVector> {
        self.check_dim(v.dim())?;
        Ok(ParamVector(
            v.iter().enumerate().map(|(i, x)| x / self.entry(i)).collect(),
        ))
    }

    /// `vᵀ H v`.
    pub fn quadratic(&self, v: &ParamVector) -> Result<f64> {
        self.check_dim(v.dim())?;
        Ok(v.iter().enumerate().map(|(i, x)| self.entry(i) * x * x).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(ParamVector::axpy(0.0, &pv(&[1., 2.]), &pv(&[3., 4.])).unwrap(), pv(&[3., 4.]));
        assert_eq!(ParamVector::axpy(1.0, &pv(&[1., 2.]), &pv(&[0., 0.])).unwrap(), pv(&[1., 2.]));
        assert_eq!(ParamVector::axpy(-2.0, &pv(&[1., -1.]), &pv(&[1., 1.])).unwrap(), pv(&[-1., 3.]));
    }

    #[test]
    fn axpy_dimension_mismatch() {
        let err = ParamVector::axpy(1.0, &pv(&[1.]), &pv(&[1., 2.])).unwrap_err();
        assert!(matches!(err, FedError::DimensionMismatch { expected: 1, found: 2 }));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::axpy(f64::MAX, &pv(&[f64::MAX]), &pv(&[0.0])).is_err());
    }

    #[test]
    fn quadratic_examples() {
        assert_eq!(DiagonalMetric::identity().quadratic(&pv(&[3., 4.])).unwrap(), 25.0);
        let h = DiagonalMetric::diagonal(vec![2., 2.], 0.1).unwrap();
        assert_eq!(h.quadratic(&pv(&[1., 1.])).unwrap(), 4.0);
        assert_eq!(h.quadratic(&ParamVector::zeros(2)).unwrap(), 0.0);
        assert!(h.quadratic(&ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn inverse_apply_examples() {
        assert_eq!(
            DiagonalMetric::identity().inverse_apply(&pv(&[5., -5.])).unwrap(),
            pv(&[5., -5.])
        );
        let h = DiagonalMetric::diagonal(vec![2., 4.], 0.1).unwrap();
        assert_eq!(h.inverse_apply(&pv(&[2., 4.])).unwrap(), pv(&[1., 1.]));
        let s = DiagonalMetric::scalar(0.5, 0.1).unwrap();
        assert_eq!(s.inverse_apply(&pv(&[1., 0.])).unwrap(), pv(&[2., 0.]));
    }

    #[test]
    fn floor_is_enforced() {
        let h = DiagonalMetric::diagonal(vec![0.0, 3.0], 0.25).unwrap();
        assert_eq!(h.min_eigenvalue(), 0.25);
        assert_eq!(h.max_eigenvalue(), 3.0);
        assert!(DiagonalMetric::scalar(1.0, 0.0).is_err());
    }

    #[test]
    fn mean_of_identical_vectors_is_exact() {
        let v = pv(&[0.1, 1.0 / 3.0, -7.3e-5]);
        let list = vec![v.clone(); 7];
        assert_eq!(ParamVector::mean(&list).unwrap(), v);
        assert_eq!(
            ParamVector::mean(&[pv(&[1., 1.]), pv(&[3., 3.])]).unwrap(),
            pv(&[2., 2.])
        );
        assert!(ParamVector::mean(std::iter::empty()).is_err());
    }

    fn metric_and_vector() -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>)> {
        (1usize..=64).prop_flat_map(|d| {
            (
                prop::collection::vec(0.0f64..10.0, d),
                1e-3f64..1.0,
                prop::collection::vec(-100.0f64..100.0, d),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn quadratic_is_sandwiched((diag, floor, v) in metric_and_vector()) {
            let h = DiagonalMetric::diagonal(diag, floor).unwrap();
            let v = ParamVector::new(v).unwrap();
            let q = h.quadratic(&v).unwrap();
            let n2 = v.norm_sq();
            prop_assert!(q >= floor * n2 * (1.0 - 1e-12));
            prop_assert!(q <= h.max_eigenvalue() * n2 * (1.0 + 1e-12));
        }

        #[test]
        fn apply_inverse_round_trip((diag, floor, v) in metric_and_vector()) {
            let h = DiagonalMetric::diagonal(diag, floor).unwrap();
            let v = ParamVector::new(v).unwrap();
            let back = h.inverse_apply(&h.apply(&v).unwrap()).unwrap();
            for (a, b) in back.iter().zip(v.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            }
        }
    }
}
