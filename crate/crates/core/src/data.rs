//! Dataset representation, ingestion, validation, and holdout splitting.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngs::RngStream;

/// Sorted unique values of the target covariate.
///
/// Observations are snapped to grid indices by exact equality; continuous
/// targets are expected to be pre-binned to a declared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    values: Vec<f64>,
}

impl TargetGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset("target grid has no values".into()));
        }
        for w in values.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(
                    "target grid values must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self { values })
    }

    /// Builds the grid from observed values (sorted, deduplicated).
    pub fn from_observed(observed: &[f64]) -> Result<Self> {
        let mut v: Vec<f64> = observed.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Grid index of a value under exact equality.
    pub fn index_of(&self, value: f64) -> Option<usize> {
        self.values
            .binary_search_by(|probe| probe.total_cmp(&value))
            .ok()
    }

    /// Span of the grid, max - min (0 for a single point).
    pub fn range(&self) -> f64 {
        self.values[self.values.len() - 1] - self.values[0]
    }

    /// A degenerate single-point grid; used where leaves must be scalars.
    pub fn single_point() -> Self {
        Self { values: vec![0.0] }
    }
}

/// One covariate column.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Continuous {
        name: String,
        values: Vec<f64>,
    },
    Categorical {
        name: String,
        /// Per-row level code, indexing into `levels`.
        codes: Vec<u32>,
        /// Level labels in first-appearance order. At most 64 levels.
        levels: Vec<String>,
    },
}

impl Column {
    pub fn name(&self) -> &str {
        match self {
            Column::Continuous { name, .. } | Column::Categorical { name, .. } => name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Continuous { values, .. } => values.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Numeric view of a row: the value itself, or the level code.
    pub fn numeric(&self, row: usize) -> f64 {
        match self {
            Column::Continuous { values, .. } => values[row],
            Column::Categorical { codes, .. } => codes[row] as f64,
        }
    }

    fn subset(&self, rows: &[usize]) -> Column {
        match self {
            Column::Continuous { name, values } => Column::Continuous {
                name: name.clone(),
                values: rows.iter().map(|&r| values[r]).collect(),
            },
            Column::Categorical {
                name,
                codes,
                levels,
            } => Column::Categorical {
                name: name.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
                levels: levels.clone(),
            },
        }
    }
}

/// Covariate matrix as shared columns, so model wiring can append derived
/// columns (propensity, treatment, target) without copying the base data.
#[derive(Debug, Clone, Default)]
pub struct CovMatrix {
    pub cols: Vec<Arc<Column>>,
}

impl CovMatrix {
    pub fn new(cols: Vec<Arc<Column>>) -> Self {
        Self { cols }
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn n_rows(&self) -> usize {
        self.cols.first().map_or(0, |c| c.len())
    }

    pub fn with_extra(&self, extra: Arc<Column>) -> Self {
        let mut cols = self.cols.clone();
        cols.push(extra);
        Self { cols }
    }

    /// Rows at the given indices, in order.
    pub fn subset_rows(&self, rows: &[usize]) -> Self {
        Self {
            cols: self
                .cols
                .iter()
                .map(|c| Arc::new(c.subset(rows)))
                .collect(),
        }
    }
}

/// A validated analysis dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Vec<u8>,
    pub z: Vec<u8>,
    pub t_idx: Vec<usize>,
    pub grid: TargetGrid,
    pub x: CovMatrix,
    pub pi_hat: Option<Vec<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn t_value(&self, i: usize) -> f64 {
        self.grid.values()[self.t_idx[i]]
    }

    /// Target values per row as a continuous column (for modes that treat
    /// the target as an ordinary covariate).
    pub fn target_column(&self) -> Column {
        Column::Continuous {
            name: "__target".into(),
            values: (0..self.n()).map(|i| self.t_value(i)).collect(),
        }
    }

    pub fn both_arms_present(&self) -> bool {
        self.z.iter().any(|&z| z == 1) && self.z.iter().any(|&z| z == 0)
    }

    pub fn from_parts(
        y: Vec<u8>,
        z: Vec<u8>,
        t_idx: Vec<usize>,
        grid: TargetGrid,
        x: CovMatrix,
        pi_hat: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyDataset("no rows".into()));
        }
        if z.len() != n || t_idx.len() != n {
            return Err(Error::DimensionMismatch(
                "outcome, treatment, and target vectors differ in length".into(),
            ));
        }
        for col in &x.cols {
            if col.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "covariate `{}` has {} rows, expected {n}",
                    col.name(),
                    col.len()
                )));
            }
        }
        if t_idx.iter().any(|&t| t >= grid.len()) {
            return Err(Error::InvalidArgument("target index out of grid".into()));
        }
        if let Some(pi) = &pi_hat {
            if pi.len() != n {
                return Err(Error::DimensionMismatch("propensity length".into()));
            }
            if pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::InvalidArgument(
                    "propensity values must lie strictly inside (0,1)".into(),
                ));
            }
        }
        Ok(Self {
            y,
            z,
            t_idx,
            grid,
            x,
            pi_hat,
        })
    }

    /// Rows at the given sorted indices; the parent grid is retained even if
    /// some grid points end up unobserved in the subset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&r| self.y[r]).collect(),
            z: rows.iter().map(|&r| self.z[r]).collect(),
            t_idx: rows.iter().map(|&r| self.t_idx[r]).collect(),
            grid: self.grid.clone(),
            x: self.x.subset_rows(rows),
            pi_hat: self
                .pi_hat
                .as_ref()
                .map(|pi| rows.iter().map(|&r| pi[r]).collect()),
        }
    }
}

/// Column-role mapping for dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub target: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub propensity: Option<String>,
    /// Field delimiter; defaults to a comma.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl Schema {
    pub fn new(outcome: &str, treatment: &str, target: &str) -> Self {
        Self {
            outcome: outcome.into(),
            treatment: treatment.into(),
            target: target.into(),
            continuous: Vec::new(),
            categorical: Vec::new(),
            propensity: None,
            delimiter: ',',
        }
    }
}

fn parse_f64(raw: &str, column: &str, row: usize) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::BadNumeric {
            column: column.to_string(),
            value: raw.to_string(),
            row,
        })
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::BadNumeric {
                    column: column.to_string(),
                    value: raw.to_string(),
                    row,
                })
            }
        })
}

fn parse_binary(raw: &str, column: &str, role: &'static str, row: usize) -> Result<u8> {
    let v = parse_f64(raw, column, row)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::NonBinary {
            role,
            column: column.to_string(),
            value: raw.to_string(),
        })
    }
}

/// Loads and validates a delimited-text dataset with a header row.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col_idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let yi = col_idx(&schema.outcome)?;
    let zi = col_idx(&schema.treatment)?;
    let ti = col_idx(&schema.target)?;
    let cont_idx: Vec<(usize, &String)> = schema
        .continuous
        .iter()
        .map(|n| col_idx(n).map(|i| (i, n)))
        .collect::<Result<_>>()?;
    let cat_idx: Vec<(usize, &String)> = schema
        .categorical
        .iter()
        .map(|n| col_idx(n).map(|i| (i, n)))
        .collect::<Result<_>>()?;
    let pi_idx = schema
        .propensity
        .as_ref()
        .map(|n| col_idx(n))
        .transpose()?;

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut t_raw = Vec::new();
    let mut cont: Vec<Vec<f64>> = vec![Vec::new(); cont_idx.len()];
    let mut cat_codes: Vec<Vec<u32>> = vec![Vec::new(); cat_idx.len()];
    let mut cat_levels: Vec<Vec<String>> = vec![Vec::new(); cat_idx.len()];
    let mut pi: Vec<f64> = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        y.push(parse_binary(field(yi), &schema.outcome, "outcome", row)?);
        z.push(parse_binary(field(zi), &schema.treatment, "treatment", row)?);
        t_raw.push(parse_f64(field(ti), &schema.target, row)?);
        for (k, &(i, name)) in cont_idx.iter().enumerate() {
            cont[k].push(parse_f64(field(i), name, row)?);
        }
        for (k, &(i, name)) in cat_idx.iter().enumerate() {
            let raw = field(i).trim();
            if raw.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    message: format!("empty categorical value in `{name}` at row {row}"),
                });
            }
            let code = match cat_levels[k].iter().position(|l| l == raw) {
                Some(c) => c as u32,
                None => {
                    if cat_levels[k].len() >= 64 {
                        return Err(Error::Parse {
                            path: path.display().to_string(),
                            message: format!("categorical `{name}` exceeds 64 levels"),
                        });
                    }
                    cat_levels[k].push(raw.to_string());
                    (cat_levels[k].len() - 1) as u32
                }
            };
            cat_codes[k].push(code);
        }
        if let Some(i) = pi_idx {
            let name = schema.propensity.as_ref().unwrap();
            pi.push(parse_f64(field(i), name, row)?);
        }
    }

    if y.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }

    let grid = TargetGrid::from_observed(&t_raw)?;
    let t_idx = t_raw
        .iter()
        .map(|&t| grid.index_of(t).expect("observed value is on the grid"))
        .collect();

    let mut cols: Vec<Arc<Column>> = Vec::new();
    for ((_, name), values) in cont_idx.iter().zip(cont) {
        cols.push(Arc::new(Column::Continuous {
            name: (*name).clone(),
            values,
        }));
    }
    for (((_, name), codes), levels) in cat_idx.iter().zip(cat_codes).zip(cat_levels) {
        cols.push(Arc::new(Column::Categorical {
            name: (*name).clone(),
            codes,
            levels,
        }));
    }

    Dataset::from_parts(
        y,
        z,
        t_idx,
        grid,
        CovMatrix::new(cols),
        if pi_idx.is_some() { Some(pi) } else { None },
    )
}

/// Writes a dataset back to delimited text; `load_dataset` with the same
/// schema reproduces it exactly.
pub fn write_dataset(path: &Path, d: &Dataset, schema: &Schema) -> Result<()> {
    let mut out = String::new();
    let delim = schema.delimiter;
    write!(
        out,
        "{}{delim}{}{delim}{}",
        schema.outcome, schema.treatment, schema.target
    )
    .unwrap();
    for col in &d.x.cols {
        write!(out, "{delim}{}", col.name()).unwrap();
    }
    if let (Some(_), Some(name)) = (&d.pi_hat, &schema.propensity) {
        write!(out, "{delim}{name}").unwrap();
    }
    out.push('\n');
    for i in 0..d.n() {
        write!(out, "{}{delim}{}{delim}{}", d.y[i], d.z[i], d.t_value(i)).unwrap();
        for col in &d.x.cols {
            match col.as_ref() {
                Column::Continuous { values, .. } => write!(out, "{delim}{}", values[i]).unwrap(),
                Column::Categorical { codes, levels, .. } => {
                    write!(out, "{delim}{}", levels[codes[i] as usize]).unwrap()
                }
            }
        }
        if let Some(pi) = &d.pi_hat {
            write!(out, "{delim}{}", pi[i]).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministically splits off `m` holdout rows.
pub fn split_holdout(d: &Dataset, m: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = d.n();
    if m == 0 || m >= n {
        return Err(Error::InvalidArgument(format!(
            "holdout size {m} out of range for n={n}"
        )));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    let mut holdout: Vec<usize> = idx[..m].to_vec();
    let mut train: Vec<usize> = idx[m..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    Ok((d.subset(&train), d.subset(&holdout)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn basic_schema() -> Schema {
        let mut s = Schema::new("y", "z", "t");
        s.continuous = vec!["x1".into()];
        s.categorical = vec!["grp".into()];
        s
    }

    #[test]
    fn loads_and_builds_grid() {
        let f = write_temp("y,z,t,x1,grp\n1,1,4.5,0.1,a\n1,0,5,0.2,b\n0,1,5,0.3,a\n1,0,9,0.4,c\n");
        let d = load_dataset(f.path(), &basic_schema()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.grid.values(), &[4.5, 5.0, 9.0]);
        assert_eq!(d.t_idx, vec![0, 1, 1, 2]);
        assert_eq!(d.y, vec![1, 1, 0, 1]);
        assert_eq!(d.z, vec![1, 0, 1, 0]);
        match d.x.cols[1].as_ref() {
            Column::Categorical { levels, codes, .. } => {
                assert_eq!(levels, &["a", "b", "c"]);
                assert_eq!(codes, &[0, 1, 0, 2]);
            }
            _ => panic!("expected categorical"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_temp("y,t,x1,grp\n1,4.5,0.1,a\n");
        let err = load_dataset(f.path(), &basic_schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "z"));
    }

    #[test]
    fn non_binary_outcome_is_rejected() {
        let f = write_temp("y,z,t,x1,grp\n2,1,4.5,0.1,a\n");
        let err = load_dataset(f.path(), &basic_schema()).unwrap_err();
        assert!(matches!(err, Error::NonBinary { role: "outcome", .. }));
    }

    #[test]
    fn unparseable_numeric_is_rejected() {
        let f = write_temp("y,z,t,x1,grp\n1,1,4.5,oops,a\n");
        let err = load_dataset(f.path(), &basic_schema()).unwrap_err();
        assert!(matches!(err, Error::BadNumeric { .. }));
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_temp("y,z,t,x1,grp\n");
        let err = load_dataset(f.path(), &basic_schema()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn roundtrip_reproduces_vectors() {
        let f = write_temp("y,z,t,x1,grp\n1,1,4.5,0.125,a\n1,0,5,0.25,b\n0,1,5,-3.5,a\n");
        let schema = basic_schema();
        let d = load_dataset(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_dataset(out.path(), &d, &schema).unwrap();
        let d2 = load_dataset(out.path(), &schema).unwrap();
        assert_eq!(d.y, d2.y);
        assert_eq!(d.z, d2.z);
        assert_eq!(d.t_idx, d2.t_idx);
        assert_eq!(d.grid, d2.grid);
        for (a, b) in d.x.cols.iter().zip(&d2.x.cols) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }

    #[test]
    fn split_holdout_partitions_and_is_deterministic() {
        let y: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        let z: Vec<u8> = (0..1000).map(|i| ((i / 2) % 2) as u8).collect();
        let t_idx: Vec<usize> = (0..1000).map(|i| i % 4).collect();
        let grid = TargetGrid::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = CovMatrix::new(vec![Arc::new(Column::Continuous {
            name: "x".into(),
            values: (0..1000).map(|i| i as f64).collect(),
        })]);
        let d = Dataset::from_parts(y, z, t_idx, grid, x, None).unwrap();

        let (train, holdout) = split_holdout(&d, 500, 99).unwrap();
        assert_eq!(train.n(), 500);
        assert_eq!(holdout.n(), 500);

        let (train2, holdout2) = split_holdout(&d, 500, 99).unwrap();
        assert_eq!(train.y, train2.y);
        assert_eq!(holdout.t_idx, holdout2.t_idx);

        // Union preserves all rows (x carries the original row id).
        let mut ids: Vec<f64> = Vec::new();
        for part in [&train, &holdout] {
            if let Column::Continuous { values, .. } = part.x.cols[0].as_ref() {
                ids.extend_from_slice(values);
            }
        }
        ids.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(ids, (0..1000).map(|i| i as f64).collect::<Vec<_>>());

        assert!(split_holdout(&d, 1000, 1).is_err());
        assert!(split_holdout(&d, 0, 1).is_err());
    }

    #[test]
    fn grid_mapping_is_bijective_on_observed_values() {
        let grid = TargetGrid::from_observed(&[5.0, 4.5, 9.0, 5.0, 4.5]).unwrap();
        assert_eq!(grid.values(), &[4.5, 5.0, 9.0]);
        for (i, &v) in grid.values().iter().enumerate() {
            assert_eq!(grid.index_of(v), Some(i));
        }
        assert_eq!(grid.index_of(6.0), None);
    }
}
