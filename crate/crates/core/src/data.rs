//! Randomized-trial datasets, row subgroups and CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CaitError, Result};
use crate::scalar::Real;

/// Measurement type of a covariate column.
///
/// Ordinal and nominal values are stored as integer codes indexing the
/// level list; for ordinal columns the list order is the level order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "levels", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Ordinal(Vec<String>),
    Nominal(Vec<String>),
}

impl ColumnKind {
    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Continuous => None,
            ColumnKind::Ordinal(l) | ColumnKind::Nominal(l) => Some(l),
        }
    }

    pub fn is_nominal(&self) -> bool {
        matches!(self, ColumnKind::Nominal(_))
    }

    fn validate(&self, name: &str) -> Result<()> {
        if let Some(levels) = self.levels() {
            if levels.is_empty() {
                return Err(CaitError::InvalidDataset(format!(
                    "column '{name}' declares no levels"
                )));
            }
            let mut seen = std::collections::HashSet::new();
            for l in levels {
                if !seen.insert(l) {
                    return Err(CaitError::InvalidDataset(format!(
                        "column '{name}' repeats level '{l}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

/// An i.i.d. sample of (outcome, treatment, covariates).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset<T> {
    outcomes: Vec<T>,
    treatments: Vec<u8>,
    /// Row-major `n x p`.
    covariates: Vec<T>,
    p: usize,
    kinds: Vec<ColumnKind>,
    column_names: Vec<String>,
    outcome_kind: OutcomeKind,
    outcome_name: String,
    treatment_name: String,
}

impl<T: Real> TrialDataset<T> {
    /// Build and validate a dataset. `covariates` is row-major with `p = kinds.len()` columns.
    pub fn new(
        outcomes: Vec<T>,
        treatments: Vec<u8>,
        covariates: Vec<T>,
        column_names: Vec<String>,
        kinds: Vec<ColumnKind>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self> {
        let n = outcomes.len();
        let p = kinds.len();
        if n == 0 {
            return Err(CaitError::InvalidDataset("dataset has no rows".into()));
        }
        if treatments.len() != n {
            return Err(CaitError::Shape { expected: n, got: treatments.len() });
        }
        if covariates.len() != n * p {
            return Err(CaitError::Shape { expected: n * p, got: covariates.len() });
        }
        if column_names.len() != p {
            return Err(CaitError::Shape { expected: p, got: column_names.len() });
        }
        for (name, kind) in column_names.iter().zip(&kinds) {
            kind.validate(name)?;
        }
        for (i, &a) in treatments.iter().enumerate() {
            if a > 1 {
                return Err(CaitError::Data {
                    row: i + 1,
                    column: "treatment".into(),
                    message: "treatment not in {0,1}".into(),
                });
            }
        }
        let n1 = treatments.iter().filter(|&&a| a == 1).count();
        if n1 == 0 || n1 == n {
            return Err(CaitError::InvalidDataset(
                "single-arm dataset: both treatment values must occur".into(),
            ));
        }
        for (i, &y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(CaitError::Data {
                    row: i + 1,
                    column: "outcome".into(),
                    message: "missing or non-finite value".into(),
                });
            }
            if outcome_kind == OutcomeKind::Binary && y != T::zero() && y != T::one() {
                return Err(CaitError::Data {
                    row: i + 1,
                    column: "outcome".into(),
                    message: "binary outcome not in {0,1}".into(),
                });
            }
        }
        for i in 0..n {
            for j in 0..p {
                let v = covariates[i * p + j];
                if !v.is_finite() {
                    return Err(CaitError::Data {
                        row: i + 1,
                        column: column_names[j].clone(),
                        message: "missing or non-finite value".into(),
                    });
                }
                if let Some(levels) = kinds[j].levels() {
                    let ok = v >= T::zero()
                        && v.fract() == T::zero()
                        && v.to_usize().is_some_and(|c| c < levels.len());
                    if !ok {
                        return Err(CaitError::Data {
                            row: i + 1,
                            column: column_names[j].clone(),
                            message: format!("level code {v} out of range"),
                        });
                    }
                }
            }
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
            p,
            kinds,
            column_names,
            outcome_kind,
            outcome_name: "y".into(),
            treatment_name: "a".into(),
        })
    }

    /// Convenience constructor for all-continuous covariates named `x1..xp`.
    pub fn from_continuous(
        outcomes: Vec<T>,
        treatments: Vec<u8>,
        covariates: Vec<T>,
        p: usize,
        outcome_kind: OutcomeKind,
    ) -> Result<Self> {
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        Self::new(outcomes, treatments, covariates, names, vec![ColumnKind::Continuous; p], outcome_kind)
    }

    pub fn with_role_names(mut self, outcome: &str, treatment: &str) -> Self {
        self.outcome_name = outcome.to_string();
        self.treatment_name = treatment.to_string();
        self
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn y(&self, i: usize) -> T {
        self.outcomes[i]
    }

    #[inline]
    pub fn a(&self, i: usize) -> u8 {
        self.treatments[i]
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[T] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> T {
        self.covariates[i * self.p + j]
    }

    pub fn outcomes(&self) -> &[T] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn covariates(&self) -> &[T] {
        &self.covariates
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn n_treated(&self) -> usize {
        self.treatments.iter().filter(|&&a| a == 1).count()
    }

    /// Dataset restricted to `rows` (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut y = Vec::with_capacity(rows.len());
        let mut a = Vec::with_capacity(rows.len());
        let mut x = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            y.push(self.outcomes[i]);
            a.push(self.treatments[i]);
            x.extend_from_slice(self.x(i));
        }
        let ds = Self::new(y, a, x, self.column_names.clone(), self.kinds.clone(), self.outcome_kind)?;
        Ok(ds.with_role_names(&self.outcome_name, &self.treatment_name))
    }
}

/// Membership flags of a subgroup `w` with cached arm counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupMask {
    flags: Vec<bool>,
    n: usize,
    n1: usize,
}

impl SubgroupMask {
    pub fn from_flags<T: Real>(ds: &TrialDataset<T>, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != ds.n() {
            return Err(CaitError::Shape { expected: ds.n(), got: flags.len() });
        }
        let mut n = 0;
        let mut n1 = 0;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                n += 1;
                n1 += ds.a(i) as usize;
            }
        }
        if n == 0 {
            return Err(CaitError::InvalidDataset("empty subgroup".into()));
        }
        Ok(Self { flags, n, n1 })
    }

    pub fn from_rows<T: Real>(ds: &TrialDataset<T>, rows: &[usize]) -> Result<Self> {
        let mut flags = vec![false; ds.n()];
        for &r in rows {
            flags[r] = true;
        }
        Self::from_flags(ds, flags)
    }

    /// Members satisfying `keep`, or `None` when no member does.
    pub fn refine<T: Real>(&self, ds: &TrialDataset<T>, keep: impl Fn(&[T]) -> bool) -> Option<Self> {
        let flags: Vec<bool> = self
            .flags
            .iter()
            .enumerate()
            .map(|(i, &f)| f && keep(ds.x(i)))
            .collect();
        Self::from_flags(ds, flags).ok()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn contains(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn count_treated(&self) -> usize {
        self.n1
    }

    pub fn count_control(&self) -> usize {
        self.n - self.n1
    }

    pub fn count_arm(&self, arm: u8) -> usize {
        if arm == 1 {
            self.n1
        } else {
            self.n - self.n1
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

/// The root subgroup: every row.
pub fn mask_all<T: Real>(ds: &TrialDataset<T>) -> SubgroupMask {
    SubgroupMask {
        flags: vec![true; ds.n()],
        n: ds.n(),
        n1: ds.n_treated(),
    }
}

/// Declared type of a CSV column; levels are optional for categorical columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeclaredKind {
    Continuous,
    Ordinal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
    Nominal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDecl {
    pub name: String,
    #[serde(flatten)]
    pub kind: DeclaredKind,
}

/// How to read a trial CSV.
///
/// Covariates are `covariates` when given, otherwise every column except
/// the outcome and treatment. Undeclared covariates are continuous.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub columns: Vec<ColumnDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_kind: Option<OutcomeKind>,
}

impl CsvSchema {
    fn declared(&self, name: &str) -> DeclaredKind {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.kind.clone())
            .unwrap_or(DeclaredKind::Continuous)
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Read a trial CSV (header row required) into a validated dataset.
pub fn load_csv<T: Real>(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    outcome_col: &str,
    treatment_col: &str,
) -> Result<TrialDataset<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CaitError::MissingColumn(name.to_string()))
    };
    let y_idx = find(outcome_col)?;
    let a_idx = find(treatment_col)?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header
            .iter()
            .filter(|h| *h != outcome_col && *h != treatment_col)
            .cloned()
            .collect(),
    };
    for decl in &schema.columns {
        if !header.contains(&decl.name) {
            return Err(CaitError::MissingColumn(decl.name.clone()));
        }
    }
    let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let declared: Vec<DeclaredKind> = cov_names.iter().map(|c| schema.declared(c)).collect();

    // Level dictionaries: explicit lists are fixed, otherwise first appearance.
    let mut dicts: Vec<Option<(Vec<String>, HashMap<String, usize>, bool)>> = declared
        .iter()
        .map(|d| match d {
            DeclaredKind::Continuous => None,
            DeclaredKind::Ordinal { levels } | DeclaredKind::Nominal { levels } => {
                let fixed = levels.is_some();
                let list = levels.clone().unwrap_or_default();
                let map = list.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
                Some((list, map, fixed))
            }
        })
        .collect();

    let p = cov_idx.len();
    let mut ys = Vec::new();
    let mut raw_a = Vec::new();
    let mut xs = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            let c = rec.get(idx).unwrap_or("");
            if is_missing(c) {
                Err(CaitError::Data {
                    row,
                    column: name.to_string(),
                    message: "missing value".into(),
                })
            } else {
                Ok(c)
            }
        };
        let parse_real = |s: &str, name: &str| -> Result<T> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .and_then(T::from_f64)
                .ok_or_else(|| CaitError::Data {
                    row,
                    column: name.to_string(),
                    message: format!("cannot parse '{s}' as a number"),
                })
        };
        ys.push(parse_real(cell(y_idx, outcome_col)?, outcome_col)?);
        let a_raw = cell(a_idx, treatment_col)?;
        let a = match a_raw.parse::<f64>() {
            Ok(v) if v == 0.0 => 0u8,
            Ok(v) if v == 1.0 => 1u8,
            _ => {
                return Err(CaitError::Data {
                    row,
                    column: treatment_col.to_string(),
                    message: "treatment not in {0,1}".into(),
                })
            }
        };
        raw_a.push(a);
        for j in 0..p {
            let name = &cov_names[j];
            let c = cell(cov_idx[j], name)?;
            match &mut dicts[j] {
                None => xs.push(parse_real(c, name)?),
                Some((list, map, fixed)) => {
                    let code = match map.get(c) {
                        Some(&code) => code,
                        None if !*fixed => {
                            list.push(c.to_string());
                            map.insert(c.to_string(), list.len() - 1);
                            list.len() - 1
                        }
                        None => {
                            return Err(CaitError::Data {
                                row,
                                column: name.clone(),
                                message: format!("level '{c}' not declared"),
                            })
                        }
                    };
                    xs.push(T::from_count(code));
                }
            }
        }
    }
    if ys.is_empty() {
        return Err(CaitError::InvalidDataset("CSV has no data rows".into()));
    }
    let kinds: Vec<ColumnKind> = declared
        .iter()
        .zip(dicts)
        .map(|(d, dict)| match (d, dict) {
            (DeclaredKind::Ordinal { .. }, Some((list, _, _))) => ColumnKind::Ordinal(list),
            (DeclaredKind::Nominal { .. }, Some((list, _, _))) => ColumnKind::Nominal(list),
            _ => ColumnKind::Continuous,
        })
        .collect();
    let outcome_kind = schema.outcome_kind.unwrap_or_else(|| {
        if ys.iter().all(|&y| y == T::zero() || y == T::one()) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    });
    let ds = TrialDataset::new(ys, raw_a, xs, cov_names, kinds, outcome_kind).map_err(|e| match e {
        CaitError::Data { row, column, message } if column == "outcome" => CaitError::Data {
            row,
            column: outcome_col.to_string(),
            message,
        },
        other => other,
    })?;
    Ok(ds.with_role_names(outcome_col, treatment_col))
}

/// Write the dataset as CSV: outcome, treatment, then covariates.
///
/// Categorical covariates are written as their level labels.
pub fn write_csv<T: Real>(ds: &TrialDataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec![ds.outcome_name().to_string(), ds.treatment_name().to_string()];
    header.extend(ds.column_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = Vec::with_capacity(ds.p() + 2);
        rec.push(ds.y(i).to_string());
        rec.push(ds.a(i).to_string());
        for (j, kind) in ds.kinds().iter().enumerate() {
            let v = ds.value(i, j);
            match kind.levels() {
                Some(levels) => rec.push(levels[v.to_usize().unwrap_or(0)].clone()),
                None => rec.push(v.to_string()),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The schema that reproduces `ds` when its CSV is reloaded.
pub fn schema_of<T: Real>(ds: &TrialDataset<T>) -> CsvSchema {
    CsvSchema {
        columns: ds
            .column_names()
            .iter()
            .zip(ds.kinds())
            .map(|(name, kind)| ColumnDecl {
                name: name.clone(),
                kind: match kind {
                    ColumnKind::Continuous => DeclaredKind::Continuous,
                    ColumnKind::Ordinal(l) => DeclaredKind::Ordinal { levels: Some(l.clone()) },
                    ColumnKind::Nominal(l) => DeclaredKind::Nominal { levels: Some(l.clone()) },
                },
            })
            .collect(),
        covariates: Some(ds.column_names().to_vec()),
        outcome_kind: Some(ds.outcome_kind()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_balanced_csv() {
        let f = write("y,a,x1,x2\n1.5,1,0.1,2\n2.5,0,0.2,3\n0.5,1,-1,4\n3,0,2,5\n1,1,0,6\n2,0,1,7\n");
        let ds: TrialDataset<f64> = load_csv(f.path(), &CsvSchema::default(), "y", "a").unwrap();
        assert_eq!(ds.n(), 6);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.n_treated(), 3);
        assert_eq!(ds.outcome_kind(), OutcomeKind::Continuous);
        assert_eq!(ds.x(2), &[-1.0, 4.0]);
    }

    #[test]
    fn empty_cell_names_row_and_column() {
        let f = write("y,a,x1\n1,1,0\n2,0,1\n3,1,\n4,0,2\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default(), "y", "a").unwrap_err();
        match err {
            CaitError::Data { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "x1");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn treatment_outside_binary_rejected() {
        let f = write("y,a,x1\n1,1,0\n2,2,1\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default(), "y", "a").unwrap_err();
        assert!(err.to_string().contains("treatment not in {0,1}"), "{err}");
    }

    #[test]
    fn single_arm_rejected() {
        let f = write("y,a,x1\n1,1,0\n2,1,1\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default(), "y", "a").unwrap_err();
        assert!(matches!(err, CaitError::InvalidDataset(_)));
    }

    #[test]
    fn missing_treatment_column() {
        let f = write("y,x1\n1,0\n");
        let err = load_csv::<f64>(f.path(), &CsvSchema::default(), "y", "a").unwrap_err();
        assert_eq!(err, CaitError::MissingColumn("a".into()));
    }

    #[test]
    fn levels_in_first_appearance_order_unless_declared() {
        let f = write("y,a,g,s\n1,1,b,lo\n2,0,a,hi\n3,1,b,mid\n");
        let schema = CsvSchema {
            columns: vec![
                ColumnDecl { name: "g".into(), kind: DeclaredKind::Nominal { levels: None } },
                ColumnDecl {
                    name: "s".into(),
                    kind: DeclaredKind::Ordinal {
                        levels: Some(vec!["lo".into(), "mid".into(), "hi".into()]),
                    },
                },
            ],
            ..Default::default()
        };
        let ds: TrialDataset<f64> = load_csv(f.path(), &schema, "y", "a").unwrap();
        assert_eq!(ds.kinds()[0], ColumnKind::Nominal(vec!["b".into(), "a".into()]));
        assert_eq!(ds.x(1), &[1.0, 2.0]);
        assert_eq!(ds.x(2), &[0.0, 1.0]);
    }

    #[test]
    fn mask_counts() {
        let y = vec![0.0; 10];
        let a = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 3.0).collect();
        let ds = TrialDataset::from_continuous(y, a, x, 1, OutcomeKind::Continuous).unwrap();
        let m = mask_all(&ds);
        assert_eq!((m.count(), m.count_treated(), m.count_control()), (10, 4, 6));
        let left = m.refine(&ds, |x| x[0] < 0.0).unwrap();
        assert_eq!(left.count(), 3);
        assert_eq!(left.count_treated() + left.count_control(), 3);
    }

    #[test]
    fn single_row_root_mask() {
        // A one-row dataset cannot have both arms, so build the mask from a two-row one.
        let ds = TrialDataset::from_continuous(vec![1.0, 2.0], vec![1, 0], vec![0.0, 1.0], 1, OutcomeKind::Continuous)
            .unwrap();
        let m = SubgroupMask::from_rows(&ds, &[0]).unwrap();
        assert_eq!(m.count(), 1);
    }
}
