//! Data model: observational datasets, moment functions, balance targets,
//! and estimate reports.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Units with covariates, a binary treatment indicator, and an outcome that
/// may be missing on units whose outcome never enters the requested
/// estimator.
///
/// Immutable after construction; all operations on it are pure functions.
#[derive(Debug, Clone)]
pub struct ObservationalDataset<T: Scalar> {
    covariates: DMatrix<T>,
    treatment: Vec<bool>,
    outcome: Vec<Option<T>>,
    names: Vec<String>,
}

impl<T: Scalar> ObservationalDataset<T> {
    /// Build a dataset, validating dimensions and finiteness.
    pub fn new(
        covariates: DMatrix<T>,
        treatment: Vec<bool>,
        outcome: Vec<Option<T>>,
    ) -> Result<Self> {
        let names = (0..covariates.ncols()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(covariates, treatment, outcome, names)
    }

    /// Build a dataset with explicit covariate column names.
    pub fn with_names(
        covariates: DMatrix<T>,
        treatment: Vec<bool>,
        outcome: Vec<Option<T>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::InvalidInput(format!(
                "length mismatch: {n} covariate rows, {} treatment entries, {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::InvalidInput("one name per covariate column required".into()));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            let row = pos % n;
            let col = pos / n;
            return Err(Error::InvalidInput(format!(
                "non-finite covariate at row {row}, column {col}"
            )));
        }
        if let Some((i, _)) = outcome
            .iter()
            .enumerate()
            .find(|(_, y)| y.is_some_and(|v| !v.is_finite()))
        {
            return Err(Error::InvalidInput(format!("non-finite outcome at row {i}")));
        }
        Ok(Self { covariates, treatment, outcome, names })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<T> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[Option<T>] {
        &self.outcome
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    pub fn n_controls(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Indices of units with `treatment == treated`, in row order.
    pub fn group_indices(&self, treated: bool) -> Vec<usize> {
        self.treatment
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == treated).then_some(i))
            .collect()
    }

    /// Outcomes of the given group, erroring on the first missing value.
    pub fn group_outcomes(&self, treated: bool, context: &str) -> Result<DVector<T>> {
        let idx = self.group_indices(treated);
        if idx.is_empty() {
            return Err(Error::EstimandUndefined(format!(
                "no {} units present",
                if treated { "treated" } else { "control" }
            )));
        }
        let mut out = DVector::zeros(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            out[k] = self.outcome[i].ok_or(Error::MissingOutcome {
                unit: i,
                context: context.to_string(),
            })?;
        }
        Ok(out)
    }

    /// Mean outcome of the given group.
    pub fn group_outcome_mean(&self, treated: bool, context: &str) -> Result<T> {
        let y = self.group_outcomes(treated, context)?;
        Ok(y.sum() / T::of(y.len() as f64))
    }
}

/// A single moment function of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MomentFn {
    /// Raw covariate column `j`.
    Raw(usize),
    /// Square of covariate column `j`.
    Square(usize),
    /// Pairwise product of columns `(j, k)`, stored with `j <= k`.
    Product(usize, usize),
    /// Column `j` of a caller-supplied feature matrix.
    External(usize),
}

/// An ordered set of distinct moment functions, optionally carrying the
/// precomputed feature matrix that `External` descriptors index into.
#[derive(Debug, Clone)]
pub struct MomentSpec<T: Scalar> {
    functions: Vec<MomentFn>,
    external: Option<DMatrix<T>>,
}

impl<T: Scalar> MomentSpec<T> {
    pub fn new(functions: Vec<MomentFn>) -> Result<Self> {
        Self::with_external(functions, None)
    }

    /// Spec over the raw columns `lo..hi`.
    pub fn raw_range(lo: usize, hi: usize) -> Self {
        let functions = (lo..hi).map(MomentFn::Raw).collect();
        Self { functions, external: None }
    }

    pub fn with_external(functions: Vec<MomentFn>, external: Option<DMatrix<T>>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::InvalidInput("moment spec needs at least one function".into()));
        }
        let mut normalized = Vec::with_capacity(functions.len());
        for f in functions {
            let f = match f {
                MomentFn::Product(j, k) if j > k => MomentFn::Product(k, j),
                other => other,
            };
            if normalized.contains(&f) {
                return Err(Error::InvalidInput(format!("duplicate moment descriptor {f:?}")));
            }
            normalized.push(f);
        }
        Ok(Self { functions: normalized, external })
    }

    pub fn functions(&self) -> &[MomentFn] {
        &self.functions
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    fn describe(f: MomentFn) -> String {
        match f {
            MomentFn::Raw(j) => format!("raw({j})"),
            MomentFn::Square(j) => format!("square({j})"),
            MomentFn::Product(j, k) => format!("product({j},{k})"),
            MomentFn::External(j) => format!("external({j})"),
        }
    }
}

/// Evaluate the moment functions on every unit: entry `(i, j)` is the j-th
/// moment function applied to unit i's covariates.
pub fn evaluate_moments<T: Scalar>(
    data: &ObservationalDataset<T>,
    spec: &MomentSpec<T>,
) -> Result<DMatrix<T>> {
    let n = data.n();
    let d = data.n_covariates();
    let x = data.covariates();
    let mut out = DMatrix::zeros(n, spec.len());
    for (j, &f) in spec.functions().iter().enumerate() {
        for i in 0..n {
            let v = match f {
                MomentFn::Raw(c) => {
                    check_column(c, d, f)?;
                    x[(i, c)]
                }
                MomentFn::Square(c) => {
                    check_column(c, d, f)?;
                    x[(i, c)] * x[(i, c)]
                }
                MomentFn::Product(c1, c2) => {
                    check_column(c1, d, f)?;
                    check_column(c2, d, f)?;
                    x[(i, c1)] * x[(i, c2)]
                }
                MomentFn::External(c) => {
                    let ext = spec.external.as_ref().ok_or_else(|| {
                        Error::InvalidInput(
                            "External moment descriptor without a feature matrix".into(),
                        )
                    })?;
                    if ext.nrows() != n || c >= ext.ncols() {
                        return Err(Error::InvalidInput(format!(
                            "external feature column {c} not available for {n} rows"
                        )));
                    }
                    ext[(i, c)]
                }
            };
            if !v.is_finite() {
                return Err(Error::NonFiniteMoment {
                    descriptor: MomentSpec::<T>::describe(f),
                    row: i,
                });
            }
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

fn check_column(c: usize, d: usize, f: MomentFn) -> Result<()> {
    if c >= d {
        return Err(Error::InvalidInput(format!(
            "moment descriptor {f:?} references covariate column {c}, but only {d} exist"
        )));
    }
    Ok(())
}

/// Which population the balance target describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetPopulation {
    TreatedMean,
    FullSampleMean,
    Explicit,
}

/// Target moment vector the source group is reweighted toward.
#[derive(Debug, Clone)]
pub struct BalanceTarget<T: Scalar> {
    values: DVector<T>,
    population: TargetPopulation,
}

impl<T: Scalar> BalanceTarget<T> {
    pub fn explicit(values: DVector<T>) -> Self {
        Self { values, population: TargetPopulation::Explicit }
    }

    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    pub fn population(&self) -> TargetPopulation {
        self.population
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Arithmetic mean of each moment column over the treated units.
pub fn treated_moment_target<T: Scalar>(
    moments: &DMatrix<T>,
    treatment: &[bool],
) -> Result<BalanceTarget<T>> {
    if treatment.len() != moments.nrows() {
        return Err(Error::InvalidInput("treatment length must match moment rows".into()));
    }
    if !treatment.iter().any(|&t| t) {
        return Err(Error::EstimandUndefined(
            "treated-group moment target needs at least one treated unit".into(),
        ));
    }
    let values = linalg::masked_column_means(moments, treatment)?;
    Ok(BalanceTarget { values, population: TargetPopulation::TreatedMean })
}

/// Mean of each moment column over the full sample (survey-mode target).
pub fn full_sample_target<T: Scalar>(moments: &DMatrix<T>) -> BalanceTarget<T> {
    BalanceTarget {
        values: linalg::column_means(moments),
        population: TargetPopulation::FullSampleMean,
    }
}

/// What an estimator estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimand {
    /// Average treatment effect on the treated.
    Patt,
    /// The counterfactual control mean among the treated.
    CounterfactualMean,
    /// A population mean estimated from a weighted subsample.
    PopulationMean,
}

/// Identity tags for the implemented estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorId {
    Ipw,
    Ols,
    Dr,
    Eb,
    EbDr,
    EbWls,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 6] = [
        EstimatorId::Ipw,
        EstimatorId::Ols,
        EstimatorId::Dr,
        EstimatorId::Eb,
        EstimatorId::EbDr,
        EstimatorId::EbWls,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorId::Ipw => "ipw",
            EstimatorId::Ols => "ols",
            EstimatorId::Dr => "dr",
            EstimatorId::Eb => "eb",
            EstimatorId::EbDr => "eb-dr",
            EstimatorId::EbWls => "eb-wls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ipw" => Ok(EstimatorId::Ipw),
            "ols" => Ok(EstimatorId::Ols),
            "dr" | "ipw-dr" => Ok(EstimatorId::Dr),
            "eb" => Ok(EstimatorId::Eb),
            "eb-dr" | "ebdr" => Ok(EstimatorId::EbDr),
            "eb-wls" | "ebwls" => Ok(EstimatorId::EbWls),
            other => Err(Error::InvalidInput(format!("unknown estimator '{other}'"))),
        }
    }
}

impl std::fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A point estimate with optional variance and a diagnostics map.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport<T: Scalar> {
    pub estimand: Estimand,
    pub estimator: EstimatorId,
    pub point: T,
    pub variance: Option<T>,
    pub std_error: Option<T>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl<T: Scalar> EstimateReport<T> {
    pub fn new(estimand: Estimand, estimator: EstimatorId, point: T) -> Self {
        Self {
            estimand,
            estimator,
            point,
            variance: None,
            std_error: None,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Attach a variance; the standard error is derived from it.
    pub fn with_variance(mut self, variance: T) -> Result<Self> {
        if variance < T::zero() {
            return Err(Error::InvalidInput(format!(
                "variance must be nonnegative, got {}",
                variance.to_f64_lossy()
            )));
        }
        self.variance = Some(variance);
        self.std_error = Some(variance.sqrt());
        Ok(self)
    }

    pub fn with_diagnostic(mut self, key: &str, value: T) -> Self {
        self.diagnostics.insert(key.to_string(), value.to_f64_lossy());
        self
    }
}

/// Read a dataset from CSV.
///
/// The header must contain a column named `T` (treatment, values 0/1) and a
/// column named `Y` (outcome; an empty cell marks a missing outcome). Every
/// other column is a covariate, kept in file order. Decimal points only; no
/// locale-dependent separators.
pub fn read_csv_dataset<T: Scalar, R: Read>(reader: R) -> Result<ObservationalDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let t_col = headers.iter().position(|h| h == "T").ok_or(Error::Parse {
        line: 1,
        message: "missing treatment column 'T'".into(),
    })?;
    let y_col = headers.iter().position(|h| h == "Y").ok_or(Error::Parse {
        line: 1,
        message: "missing outcome column 'Y'".into(),
    })?;
    let cov_cols: Vec<usize> =
        (0..headers.len()).filter(|&j| j != t_col && j != y_col).collect();
    let names: Vec<String> = cov_cols.iter().map(|&j| headers[j].to_string()).collect();

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut rows: Vec<T> = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let t_raw: f64 = parse_field(&record[t_col], line, "T")?;
        let t = if t_raw == 0.0 {
            false
        } else if t_raw == 1.0 {
            true
        } else {
            return Err(Error::Parse {
                line,
                message: format!("treatment must be 0 or 1, got {t_raw}"),
            });
        };
        treatment.push(t);
        let y_field = record[y_col].trim();
        outcome.push(if y_field.is_empty() {
            None
        } else {
            Some(T::of(parse_field(y_field, line, "Y")?))
        });
        for &j in &cov_cols {
            rows.push(T::of(parse_field(&record[j], line, &headers[j])?));
        }
    }
    if treatment.is_empty() {
        return Err(Error::Parse { line: 2, message: "no data rows".into() });
    }
    let covariates =
        DMatrix::from_row_iterator(treatment.len(), cov_cols.len(), rows);
    ObservationalDataset::with_names(covariates, treatment, outcome, names)
}

fn parse_field(s: &str, line: usize, col: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse '{s}' in column {col} as a number"),
    })?;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_dataset() -> ObservationalDataset<f64> {
        // Rows: (x1, x2), T, Y
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 4.0, 0.0, 5.0, 2.0, 3.0]);
        ObservationalDataset::new(
            x,
            vec![true, false, false, true],
            vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)],
        )
        .unwrap()
    }

    #[test]
    fn raw_descriptors_reproduce_covariates() {
        let data = toy_dataset();
        let spec = MomentSpec::raw_range(0, 2);
        let m = evaluate_moments(&data, &spec).unwrap();
        assert_eq!(m, *data.covariates());
    }

    #[test]
    fn square_descriptor_is_forced() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        let data =
            ObservationalDataset::new(x, vec![true, false], vec![Some(0.0), Some(0.0)]).unwrap();
        let spec = MomentSpec::new(vec![MomentFn::Square(0)]).unwrap();
        let m = evaluate_moments(&data, &spec).unwrap();
        assert_eq!(m.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 4.0]);
    }

    #[test]
    fn product_descriptor_is_forced() {
        let x = DMatrix::from_row_slice(2, 3, &[9.0, 2.0, 3.0, 9.0, 0.0, 5.0]);
        let data =
            ObservationalDataset::new(x, vec![true, false], vec![Some(0.0), Some(0.0)]).unwrap();
        let spec = MomentSpec::new(vec![MomentFn::Product(1, 2)]).unwrap();
        let m = evaluate_moments(&data, &spec).unwrap();
        assert_eq!(m.column(0).iter().copied().collect::<Vec<_>>(), vec![6.0, 0.0]);
    }

    #[test]
    fn product_overflow_is_reported() {
        let x = DMatrix::from_row_slice(1, 2, &[1e300, 1e300]);
        let data = ObservationalDataset::new(x, vec![true], vec![Some(0.0)]).unwrap();
        let spec = MomentSpec::new(vec![MomentFn::Product(0, 1)]).unwrap();
        match evaluate_moments(&data, &spec) {
            Err(Error::NonFiniteMoment { descriptor, row }) => {
                assert_eq!(row, 0);
                assert!(descriptor.contains("product"));
            }
            other => panic!("expected NonFiniteMoment, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_descriptors_rejected() {
        assert!(MomentSpec::<f64>::new(vec![MomentFn::Raw(0), MomentFn::Raw(0)]).is_err());
        // Products are unordered pairs.
        assert!(MomentSpec::<f64>::new(vec![
            MomentFn::Product(0, 1),
            MomentFn::Product(1, 0)
        ])
        .is_err());
    }

    #[test]
    fn treated_target_single_unit() {
        let m = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 9.0, 9.0]);
        let target = treated_moment_target(&m, &[true, false]).unwrap();
        assert_eq!(target.values().as_slice(), &[1.5, -2.0]);
        assert_eq!(target.population(), TargetPopulation::TreatedMean);
    }

    #[test]
    fn treated_target_two_units() {
        let m = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 2.0, 4.0, 7.0, 7.0]);
        let target = treated_moment_target(&m, &[true, true, false]).unwrap();
        assert_eq!(target.values().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn treated_target_requires_treated_units() {
        let m = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            treated_moment_target(&m, &[false, false]),
            Err(Error::EstimandUndefined(_))
        ));
    }

    #[test]
    fn moment_evaluation_is_row_independent() {
        let data = toy_dataset();
        let spec = MomentSpec::new(vec![
            MomentFn::Raw(0),
            MomentFn::Square(1),
            MomentFn::Product(0, 1),
        ])
        .unwrap();
        let m = evaluate_moments(&data, &spec).unwrap();
        // Permute rows and re-evaluate: output rows permute identically.
        let perm = [2usize, 0, 3, 1];
        let xp = data.covariates().select_rows(&perm);
        let tp: Vec<bool> = perm.iter().map(|&i| data.treatment()[i]).collect();
        let yp: Vec<Option<f64>> = perm.iter().map(|&i| data.outcome()[i]).collect();
        let datap = ObservationalDataset::new(xp, tp, yp).unwrap();
        let mp = evaluate_moments(&datap, &spec).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(mp.row(new_row), m.row(old_row));
        }
    }

    #[test]
    fn treated_target_invariant_to_duplication() {
        let m = DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 100.0]);
        let t = [true, true, false];
        let base = treated_moment_target(&m, &t).unwrap();
        // Duplicate the full treated group.
        let m2 = DMatrix::from_row_slice(5, 1, &[1.0, 3.0, 100.0, 1.0, 3.0]);
        let t2 = [true, true, false, true, true];
        let dup = treated_moment_target(&m2, &t2).unwrap();
        assert_abs_diff_eq!(base.values()[0], dup.values()[0], epsilon = 1e-15);
    }

    #[test]
    fn csv_roundtrip_with_missing_outcome() {
        let csv = "x1,T,Y,x2\n0.5,1,2.5,1.0\n-0.25,0,,2.0\n";
        let data: ObservationalDataset<f64> = read_csv_dataset(csv.as_bytes()).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.covariate_names(), &["x1".to_string(), "x2".to_string()]);
        assert_eq!(data.treatment(), &[true, false]);
        assert_eq!(data.outcome()[0], Some(2.5));
        assert_eq!(data.outcome()[1], None);
        assert_abs_diff_eq!(data.covariates()[(1, 0)], -0.25);
    }

    #[test]
    fn csv_rejects_bad_treatment() {
        let csv = "x1,T,Y\n0.5,2,1.0\n";
        assert!(matches!(
            read_csv_dataset::<f64, _>(csv.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn report_variance_derives_std_error() {
        let r = EstimateReport::new(Estimand::Patt, EstimatorId::Eb, 1.0)
            .with_variance(4.0)
            .unwrap();
        assert_eq!(r.std_error, Some(2.0));
        assert!(EstimateReport::new(Estimand::Patt, EstimatorId::Eb, 1.0)
            .with_variance(-1.0)
            .is_err());
    }
}
