//! Trial data: outcomes, -1/+1 treatment codes, covariates, randomization
//! weights, and CSV ingestion.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Outcome scale of the trial endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

impl std::fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeKind::Continuous => write!(f, "continuous"),
            OutcomeKind::Binary => write!(f, "binary"),
        }
    }
}

/// Dense row-major matrix of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(data: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix buffer has {} entries, expected {}x{}",
                data.len(),
                n_rows,
                n_cols
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    n_cols
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
        })
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols + col]
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n_cols..(row + 1) * self.n_cols]
    }

    /// New matrix whose row `i` is `self.row(perm[i])`.
    pub fn permuted_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.n_rows, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.row(src));
        }
        Matrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            data,
        }
    }
}

/// Inverse randomization-probability factor
/// `w = (t+1)/(2 p) - (t-1)/(2 (1-p))` for `t` in {-1,+1}.
///
/// Treated samples get `1/p`, controls `1/(1-p)`; at p = 1/2 every sample
/// gets weight 2. The weights are kept raw (unnormalized) so that equal and
/// unequal randomization share one code path.
pub fn rand_weight(t: i8, p_treat: f64) -> Result<f64> {
    check_p_treat(p_treat)?;
    match t {
        1 => Ok(1.0 / p_treat),
        -1 => Ok(1.0 / (1.0 - p_treat)),
        other => Err(Error::InvalidData(format!(
            "treatment code {other} is not in {{-1,+1}}"
        ))),
    }
}

fn check_p_treat(p_treat: f64) -> Result<()> {
    if !(p_treat > 0.0 && p_treat < 1.0) {
        return Err(Error::InvalidParam(format!(
            "p_treat must lie in (0,1), got {p_treat}"
        )));
    }
    Ok(())
}

/// Observed trial data for one analysis.
///
/// Immutable after construction; shared concurrent reads are safe. Sampling
/// weights default to 1 and multiply the randomization weights wherever
/// gradients and hessians are weighted (case-control designs).
#[derive(Debug, Clone)]
pub struct TrialDataset {
    y: Vec<f64>,
    t: Vec<i8>,
    x: Matrix,
    p_treat: f64,
    w_sample: Vec<f64>,
    outcome_kind: OutcomeKind,
    feature_names: Vec<String>,
}

impl TrialDataset {
    pub fn new(
        y: Vec<f64>,
        t: Vec<i8>,
        x: Matrix,
        p_treat: f64,
        w_sample: Option<Vec<f64>>,
        outcome_kind: OutcomeKind,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        if t.len() != n || x.n_rows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {} rows, t has {}, x has {}",
                n,
                t.len(),
                x.n_rows()
            )));
        }
        check_p_treat(p_treat)?;
        for (i, &ti) in t.iter().enumerate() {
            if ti != -1 && ti != 1 {
                return Err(Error::InvalidData(format!(
                    "row {}: treatment code {} is not in {{-1,+1}}",
                    i + 1,
                    ti
                )));
            }
        }
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::InvalidData(format!(
                    "row {}: outcome is not finite",
                    i + 1
                )));
            }
            if outcome_kind == OutcomeKind::Binary && yi != 0.0 && yi != 1.0 {
                return Err(Error::InvalidData(format!(
                    "row {}: binary outcome must be 0 or 1, got {}",
                    i + 1,
                    yi
                )));
            }
        }
        let w_sample = match w_sample {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "w_sample has {} rows, expected {}",
                        w.len(),
                        n
                    )));
                }
                for (i, &wi) in w.iter().enumerate() {
                    if !(wi.is_finite() && wi > 0.0) {
                        return Err(Error::InvalidData(format!(
                            "row {}: sampling weight must be positive, got {}",
                            i + 1,
                            wi
                        )));
                    }
                }
                w
            }
            None => vec![1.0; n],
        };
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(
                "covariate matrix contains non-finite values".into(),
            ));
        }
        let feature_names = match feature_names {
            Some(names) => {
                if names.len() != x.n_cols() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} feature names for {} covariates",
                        names.len(),
                        x.n_cols()
                    )));
                }
                names
            }
            None => (1..=x.n_cols()).map(|j| format!("x{j}")).collect(),
        };
        Ok(Self {
            y,
            t,
            x,
            p_treat,
            w_sample,
            outcome_kind,
            feature_names,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.x.n_cols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[i8] {
        &self.t
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn p_treat(&self) -> f64 {
        self.p_treat
    }

    pub fn w_sample(&self) -> &[f64] {
        &self.w_sample
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Randomization weight for row `i`.
    #[inline]
    pub fn rand_weight_for(&self, i: usize) -> f64 {
        if self.t[i] == 1 {
            1.0 / self.p_treat
        } else {
            1.0 / (1.0 - self.p_treat)
        }
    }

    /// Randomization weight times sampling weight; this is the factor carried
    /// into every gradient and hessian.
    #[inline]
    pub fn combined_weight(&self, i: usize) -> f64 {
        self.rand_weight_for(i) * self.w_sample[i]
    }

    /// Row indices assigned to arm `t` (-1 or +1).
    pub fn arm_rows(&self, t: i8) -> Vec<usize> {
        self.t
            .iter()
            .enumerate()
            .filter(|(_, &ti)| ti == t)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Column mapping for CSV ingestion.
///
/// When `covariates` is `None`, every column other than the outcome,
/// treatment, weight, and a `true_tau` column (written by `simulate`) is taken
/// as a covariate, in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub weight: Option<String>,
    pub covariates: Option<Vec<String>>,
    /// Accept 0/1 treatment coding and remap to -1/+1 at the boundary.
    pub treatment_is_01: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            treatment: "t".into(),
            weight: None,
            covariates: None,
            treatment_is_01: false,
        }
    }
}

/// Column name `simulate` uses for the generating-model effect; skipped by
/// default when inferring covariates.
pub const TRUE_TAU_COLUMN: &str = "true_tau";

/// Load a trial dataset from a headered CSV file ('.' decimal separator).
pub fn load_csv(
    path: &Path,
    schema: &CsvSchema,
    p_treat: f64,
    outcome_kind: OutcomeKind,
) -> Result<TrialDataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema, p_treat, outcome_kind)
}

pub fn load_csv_reader<R: Read>(
    reader: R,
    schema: &CsvSchema,
    p_treat: f64,
    outcome_kind: OutcomeKind,
) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };

    let y_col = find(&schema.outcome)?;
    let t_col = find(&schema.treatment)?;
    let w_col = match &schema.weight {
        Some(name) => Some(find(name)?),
        None => None,
    };
    let cov_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|&j| {
                j != y_col
                    && j != t_col
                    && Some(j) != w_col
                    && headers[j] != TRUE_TAU_COLUMN
            })
            .collect(),
    };
    if cov_cols.is_empty() {
        return Err(Error::InvalidData("no covariate columns".into()));
    }
    let feature_names: Vec<String> = cov_cols.iter().map(|&j| headers[j].clone()).collect();

    let parse = |field: &str, row: usize, col: usize| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::CsvCell {
            row,
            column: headers[col].clone(),
            message: format!("cannot parse '{}' as a number", field.trim()),
        })
    };

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut w = Vec::new();
    let mut xdata = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1; // 1-based data row, header excluded
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::InvalidData(format!(
                "data row {}: {} fields, expected {}",
                row,
                record.len(),
                headers.len()
            )));
        }
        let yi = parse(&record[y_col], row, y_col)?;
        if outcome_kind == OutcomeKind::Binary && yi != 0.0 && yi != 1.0 {
            return Err(Error::CsvCell {
                row,
                column: headers[y_col].clone(),
                message: format!("binary outcome must be 0 or 1, got {yi}"),
            });
        }
        let traw = parse(&record[t_col], row, t_col)?;
        let ti = decode_treatment(traw, schema.treatment_is_01).ok_or_else(|| Error::CsvCell {
            row,
            column: headers[t_col].clone(),
            message: if schema.treatment_is_01 {
                format!("treatment must be 0 or 1, got {traw}")
            } else {
                format!("treatment must be -1 or +1, got {traw}")
            },
        })?;
        if let Some(wc) = w_col {
            let wi = parse(&record[wc], row, wc)?;
            if !(wi > 0.0) {
                return Err(Error::CsvCell {
                    row,
                    column: headers[wc].clone(),
                    message: format!("sampling weight must be positive, got {wi}"),
                });
            }
            w.push(wi);
        }
        for &c in &cov_cols {
            xdata.push(parse(&record[c], row, c)?);
        }
        y.push(yi);
        t.push(ti);
    }
    let n = y.len();
    let x = Matrix::from_vec(xdata, n, cov_cols.len())?;
    TrialDataset::new(
        y,
        t,
        x,
        p_treat,
        if w_col.is_some() { Some(w) } else { None },
        outcome_kind,
        Some(feature_names),
    )
}

fn decode_treatment(raw: f64, is_01: bool) -> Option<i8> {
    let control = if is_01 { 0.0 } else { -1.0 };
    if raw == control {
        Some(-1)
    } else if raw == 1.0 {
        Some(1)
    } else {
        None
    }
}

/// Load a single named numeric column (e.g. an externally fitted `a0`).
pub fn load_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::MissingColumn(column.to_owned()))?;
    let mut out = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let field = record[col].trim();
        out.push(field.parse::<f64>().map_err(|_| Error::CsvCell {
            row: idx + 1,
            column: column.to_owned(),
            message: format!("cannot parse '{field}' as a number"),
        })?);
    }
    Ok(out)
}

/// Load only the named covariate columns of a CSV file (prediction input).
pub fn load_covariates(path: &Path, feature_names: &[String]) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let cols: Vec<usize> = feature_names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::new();
    let mut n = 0;
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        for &c in &cols {
            let field = record[c].trim();
            data.push(field.parse::<f64>().map_err(|_| Error::CsvCell {
                row: idx + 1,
                column: headers[c].clone(),
                message: format!("cannot parse '{field}' as a number"),
            })?);
        }
        n += 1;
    }
    Matrix::from_vec(data, n, cols.len())
}
