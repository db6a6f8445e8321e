//! Tabular data model: CSV ingestion against an explicit schema,
//! validation, optional z-scoring of continuous confounders, and the
//! stratum-assignment bookkeeping shared by every stratifier.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Outcome,
    Treatment,
    Confounder,
    Ignore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    Reject,
    DropRows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub missing_by_column: BTreeMap<String, usize>,
}

/// Validated dataset: outcome `y`, binary treatment `t`, and the confounder
/// matrix `x` (continuous columns as-is, categorical columns as integer
/// level codes in first-appearance order).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub t: Vec<u8>,
    pub x: Matrix,
    /// Confounder columns only, in matrix column order.
    pub confounders: Vec<ColumnSpec>,
    /// Per confounder column: level dictionary for categorical columns.
    pub levels: Vec<Option<Vec<String>>>,
    /// Per confounder column: (mean, sd) applied by `standardize`.
    pub standardization: Vec<Option<(f64, f64)>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn confounder_kinds(&self) -> Vec<ColumnKind> {
        self.confounders.iter().map(|c| c.kind).collect()
    }

    /// Assemble a dataset from already-numeric parts (simulation, tests).
    pub fn from_parts(y: Vec<f64>, t: Vec<u8>, x: Matrix, kinds: &[ColumnKind]) -> Result<Self> {
        let confounders = kinds
            .iter()
            .enumerate()
            .map(|(j, &kind)| ColumnSpec {
                name: format!("x{}", j + 1),
                kind,
                role: ColumnRole::Confounder,
            })
            .collect::<Vec<_>>();
        let p = x.cols();
        let d = Dataset {
            y,
            t,
            x,
            confounders,
            levels: vec![None; p],
            standardization: vec![None; p],
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if self.t.len() != n || self.x.rows() != n {
            return Err(Error::Data("y, t, x length mismatch".into()));
        }
        if self.x.cols() == 0 {
            return Err(Error::Data("no confounder columns".into()));
        }
        if self.t.iter().any(|&v| v > 1) {
            return Err(Error::Data("non-binary treatment".into()));
        }
        let n1 = self.t.iter().filter(|&&v| v == 1).count();
        if n1 == 0 || n1 == n {
            return Err(Error::Data("a treatment arm is empty".into()));
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

/// Read a CSV file against `schema`. Columns in the file but absent from
/// the schema are an error, as are schema columns missing from the header.
/// Missing cells ("" or "NA") are handled per `policy`.
pub fn load_csv(
    path: &Path,
    schema: &[ColumnSpec],
    policy: MissingPolicy,
) -> Result<(Dataset, LoadReport)> {
    let n_outcome = schema.iter().filter(|c| c.role == ColumnRole::Outcome).count();
    let n_treat = schema.iter().filter(|c| c.role == ColumnRole::Treatment).count();
    if n_outcome != 1 || n_treat != 1 {
        return Err(Error::Schema(format!(
            "schema needs exactly one outcome and one treatment column (got {n_outcome} and {n_treat})"
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    // Map each schema column to its position in the file.
    let mut positions = Vec::with_capacity(schema.len());
    for spec in schema {
        let pos = headers
            .iter()
            .position(|h| *h == spec.name)
            .ok_or_else(|| Error::Schema(format!("column '{}' not in header", spec.name)))?;
        positions.push(pos);
    }

    let confounder_idx: Vec<usize> = schema
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role == ColumnRole::Confounder)
        .map(|(i, _)| i)
        .collect();
    if confounder_idx.is_empty() {
        return Err(Error::Schema("no confounder columns in schema".into()));
    }
    let outcome_i = schema.iter().position(|c| c.role == ColumnRole::Outcome).unwrap();
    let treat_i = schema.iter().position(|c| c.role == ColumnRole::Treatment).unwrap();

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut raw_rows: Vec<Vec<String>> = Vec::new();
    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut missing_by_column: BTreeMap<String, usize> = BTreeMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        rows_read += 1;
        let mut cells = Vec::with_capacity(schema.len());
        let mut row_missing = false;
        for (spec, &pos) in schema.iter().zip(&positions) {
            let cell = record.get(pos).unwrap_or("").trim().to_owned();
            if is_missing(&cell) && spec.role != ColumnRole::Ignore {
                *missing_by_column.entry(spec.name.clone()).or_insert(0) += 1;
                row_missing = true;
            }
            cells.push(cell);
        }
        if row_missing {
            match policy {
                MissingPolicy::Reject => {
                    return Err(Error::Data(format!(
                        "missing value in row {rows_read} under policy=reject"
                    )))
                }
                MissingPolicy::DropRows => {
                    rows_dropped += 1;
                    continue;
                }
            }
        }
        let yv: f64 = cells[outcome_i]
            .parse()
            .map_err(|_| Error::Data(format!("unparseable outcome '{}' in row {rows_read}", cells[outcome_i])))?;
        let tv: f64 = cells[treat_i]
            .parse()
            .map_err(|_| Error::Data(format!("unparseable treatment '{}' in row {rows_read}", cells[treat_i])))?;
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::Data(format!(
                "non-binary treatment value '{}' in row {rows_read}",
                cells[treat_i]
            )));
        }
        y.push(yv);
        t.push(tv as u8);
        raw_rows.push(cells);
    }

    if y.is_empty() {
        return Err(Error::Data("no usable rows after ingestion".into()));
    }

    // Encode confounders: continuous parsed as f64, categorical coded by
    // first appearance in file order.
    let p = confounder_idx.len();
    let mut x = Matrix::zeros(y.len(), p);
    let mut levels: Vec<Option<Vec<String>>> = vec![None; p];
    let mut confounders = Vec::with_capacity(p);
    for (col, &si) in confounder_idx.iter().enumerate() {
        let spec = &schema[si];
        confounders.push(spec.clone());
        match spec.kind {
            ColumnKind::Continuous => {
                for (i, row) in raw_rows.iter().enumerate() {
                    let v: f64 = row[si].parse().map_err(|_| {
                        Error::Data(format!(
                            "unparseable value '{}' in continuous column '{}'",
                            row[si], spec.name
                        ))
                    })?;
                    x.set(i, col, v);
                }
            }
            ColumnKind::Categorical => {
                let mut dict: Vec<String> = Vec::new();
                for (i, row) in raw_rows.iter().enumerate() {
                    let cell = &row[si];
                    let code = match dict.iter().position(|l| l == cell) {
                        Some(c) => c,
                        None => {
                            dict.push(cell.clone());
                            dict.len() - 1
                        }
                    };
                    x.set(i, col, code as f64);
                }
                levels[col] = Some(dict);
            }
        }
    }

    let d = Dataset {
        y,
        t,
        x,
        confounders,
        levels,
        standardization: vec![None; p],
    };
    d.validate()?;
    Ok((
        d,
        LoadReport {
            rows_read,
            rows_dropped,
            missing_by_column,
        },
    ))
}

/// Z-score continuous confounder columns. Categorical columns, `y` and `t`
/// are untouched; the applied (mean, sd) pairs are stored on the result.
/// With `enabled = false` this is the identity.
pub fn standardize(d: &Dataset, enabled: bool) -> Result<Dataset> {
    if !enabled {
        return Ok(d.clone());
    }
    let n = d.n() as f64;
    let mut out = d.clone();
    for j in 0..d.p() {
        if d.confounders[j].kind != ColumnKind::Continuous {
            continue;
        }
        let col = d.x.column(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = var.sqrt();
        if sd == 0.0 {
            return Err(Error::Data(format!(
                "zero-variance continuous column '{}' cannot be standardized",
                d.confounders[j].name
            )));
        }
        for i in 0..d.n() {
            out.x.set(i, j, (d.x.get(i, j) - mean) / sd);
        }
        out.standardization[j] = Some((mean, sd));
    }
    Ok(out)
}

/// Label marking a row that belongs to no retained stratum.
pub const UNASSIGNED: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
}

/// Dense stratum labels (0..J-1, `UNASSIGNED` for dropped rows) plus
/// per-stratum arm counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataAssignment {
    pub labels: Vec<i64>,
    pub counts: Vec<StratumCounts>,
}

impl StrataAssignment {
    pub fn j(&self) -> usize {
        self.counts.len()
    }

    pub fn assigned(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNASSIGNED).count()
    }
}

/// Relabel raw stratum labels densely by first appearance and compute arm
/// counts. Negative raw labels are treated as unassigned.
pub fn compact_strata(raw: &[i64], t: &[u8]) -> StrataAssignment {
    assert_eq!(raw.len(), t.len(), "labels/treatment length mismatch");
    let mut map: BTreeMap<i64, i64> = BTreeMap::new();
    let mut order: Vec<i64> = Vec::new();
    let mut labels = Vec::with_capacity(raw.len());
    for &l in raw {
        if l < 0 {
            labels.push(UNASSIGNED);
            continue;
        }
        let next = order.len() as i64;
        let dense = *map.entry(l).or_insert_with(|| {
            order.push(l);
            next
        });
        labels.push(dense);
    }
    let mut counts = vec![
        StratumCounts { n: 0, n1: 0, n0: 0 };
        order.len()
    ];
    for (i, &l) in labels.iter().enumerate() {
        if l == UNASSIGNED {
            continue;
        }
        let c = &mut counts[l as usize];
        c.n += 1;
        if t[i] == 1 {
            c.n1 += 1;
        } else {
            c.n0 += 1;
        }
    }
    StrataAssignment { labels, counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(name: &str, kind: ColumnKind, role: ColumnRole) -> ColumnSpec {
        ColumnSpec {
            name: name.into(),
            kind,
            role,
        }
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn efm_like_schema() -> Vec<ColumnSpec> {
        vec![
            spec("y", ColumnKind::Continuous, ColumnRole::Outcome),
            spec("t", ColumnKind::Categorical, ColumnRole::Treatment),
            spec("x1", ColumnKind::Continuous, ColumnRole::Confounder),
            spec("x2", ColumnKind::Categorical, ColumnRole::Confounder),
        ]
    }

    #[test]
    fn clean_passthrough() {
        let f = write_csv("y,t,x1,x2\n1.0,1,0.5,a\n2.0,0,0.7,b\n3.0,1,0.2,a\n4.0,0,0.9,c\n");
        let (d, rep) = load_csv(f.path(), &efm_like_schema(), MissingPolicy::Reject).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.p(), 2);
        assert_eq!(rep.rows_read, 4);
        assert_eq!(rep.rows_dropped, 0);
        // categorical coded by first appearance: a=0, b=1, c=2
        assert_eq!(d.x.column(1), vec![0.0, 1.0, 0.0, 2.0]);
        assert_eq!(d.levels[1].as_ref().unwrap(), &["a", "b", "c"]);
    }

    #[test]
    fn drop_rows_policy_decrements_n() {
        let f = write_csv("y,t,x1,x2\n1.0,1,0.5,a\n2.0,0,,b\n3.0,1,0.2,a\n4.0,0,0.9,c\n");
        let (d, rep) = load_csv(f.path(), &efm_like_schema(), MissingPolicy::DropRows).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(rep.rows_dropped, 1);
        assert_eq!(rep.missing_by_column["x1"], 1);
    }

    #[test]
    fn reject_policy_errors_on_missing() {
        let f = write_csv("y,t,x1,x2\n1.0,1,NA,a\n2.0,0,0.7,b\n");
        let err = load_csv(f.path(), &efm_like_schema(), MissingPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let f = write_csv("y,t,x1,x2\n1.0,2,0.5,a\n2.0,0,0.7,b\n");
        let err = load_csv(f.path(), &efm_like_schema(), MissingPolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("non-binary treatment"));
    }

    #[test]
    fn empty_arm_rejected() {
        let f = write_csv("y,t,x1,x2\n1.0,1,0.5,a\n2.0,1,0.7,b\n");
        let err = load_csv(f.path(), &efm_like_schema(), MissingPolicy::Reject).unwrap_err();
        assert!(err.to_string().contains("arm is empty"));
    }

    #[test]
    fn header_mismatch() {
        let f = write_csv("y,t,z\n1.0,1,0.5\n");
        let err = load_csv(f.path(), &efm_like_schema(), MissingPolicy::Reject).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn standardize_zscores_arithmetic_progression() {
        let d = Dataset::from_parts(
            vec![0.0, 0.0, 1.0],
            vec![0, 1, 0],
            Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]),
            &[ColumnKind::Continuous],
        )
        .unwrap();
        let s = standardize(&d, true).unwrap();
        let col = s.x.column(0);
        assert!((col[0] + 1.0).abs() < 1e-12);
        assert!(col[1].abs() < 1e-12);
        assert!((col[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_disabled_is_identity() {
        let d = Dataset::from_parts(
            vec![0.0, 1.0],
            vec![0, 1],
            Matrix::from_rows(&[vec![5.0], vec![7.0]]),
            &[ColumnKind::Continuous],
        )
        .unwrap();
        let s = standardize(&d, false).unwrap();
        assert_eq!(s.x, d.x);
    }

    #[test]
    fn standardize_zero_variance_errors() {
        let d = Dataset::from_parts(
            vec![0.0, 1.0, 0.0],
            vec![0, 1, 0],
            Matrix::from_rows(&[vec![5.0], vec![5.0], vec![5.0]]),
            &[ColumnKind::Continuous],
        )
        .unwrap();
        let err = standardize(&d, true).unwrap_err();
        assert!(err.to_string().contains("x1"));
    }

    #[test]
    fn standardize_roundtrip_recovers_input() {
        let d = Dataset::from_parts(
            vec![0.0, 1.0, 0.5, 0.2],
            vec![0, 1, 0, 1],
            Matrix::from_rows(&[
                vec![1.5, 0.0],
                vec![-2.25, 1.0],
                vec![3.125, 0.0],
                vec![0.875, 1.0],
            ]),
            &[ColumnKind::Continuous, ColumnKind::Categorical],
        )
        .unwrap();
        let s = standardize(&d, true).unwrap();
        let (mean, sd) = s.standardization[0].unwrap();
        for i in 0..d.n() {
            let back = s.x.get(i, 0) * sd + mean;
            let orig = d.x.get(i, 0);
            assert!((back - orig).abs() <= 1e-12 * orig.abs().max(1.0));
        }
        // categorical column untouched
        assert_eq!(s.x.column(1), d.x.column(1));
    }

    #[test]
    fn compact_counts() {
        let s = compact_strata(&[7, 7, 3, 3], &[1, 0, 1, 0]);
        assert_eq!(s.j(), 2);
        assert_eq!(s.labels, vec![0, 0, 1, 1]);
        assert_eq!(s.counts[0], StratumCounts { n: 2, n1: 1, n0: 1 });
        assert_eq!(s.counts[1], StratumCounts { n: 2, n1: 1, n0: 1 });
    }

    #[test]
    fn compact_single_and_distinct() {
        let s = compact_strata(&[4, 4, 4], &[1, 0, 0]);
        assert_eq!(s.j(), 1);
        let s = compact_strata(&[1, 2, 3], &[1, 0, 1]);
        assert_eq!(s.j(), 3);
        assert!(s.counts.iter().all(|c| c.n == 1));
    }

    #[test]
    fn compact_handles_sentinel() {
        let s = compact_strata(&[5, -1, 5, 9], &[1, 0, 0, 1]);
        assert_eq!(s.labels, vec![0, UNASSIGNED, 0, 1]);
        assert_eq!(s.assigned(), 3);
        let total: usize = s.counts.iter().map(|c| c.n).sum();
        assert_eq!(total, 3);
        assert!(s.counts.iter().all(|c| c.n == c.n1 + c.n0));
    }
}
