//! Tabular inputs and outputs.
//!
//! Real data goes through [`ingest_csv`] and [`preprocess`]: feature columns
//! with more than 20% missing cells are dropped, then rows with any missing
//! cell, then every column (target included) is min-max scaled to `[0, 1]`.
//! Synthetic data from [`make_synthetic`] is scaled the same way.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::regression::RegressionProblem;
use crate::rng::seeded;
use crate::{Error, Result};

/// Feature columns missing strictly more than this fraction are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.20;

/// Tokens read as missing besides the empty string and anything non-numeric.
const MISSING_TOKENS: [&str; 4] = ["na", "nan", "?", "null"];

#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub target: String,
}

impl RawTable {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Option<f64>>>, target: impl Into<String>) -> Result<Self> {
        let target = target.into();
        if columns.len() < 2 {
            return Err(Error::Data(format!("need at least 2 columns, got {}", columns.len())));
        }
        if !columns.contains(&target) {
            return Err(Error::Data(format!("target column `{target}` not found")));
        }
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns.len()) {
            return Err(Error::Data(format!(
                "row {i} has {} cells, header has {}",
                row.len(),
                columns.len()
            )));
        }
        Ok(Self { columns, rows, target })
    }

    pub fn missing_count(&self) -> usize {
        self.rows.iter().flatten().filter(|c| c.is_none()).count()
    }

    fn target_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| *c == self.target)
            .expect("validated target")
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || MISSING_TOKENS.contains(&t.to_ascii_lowercase().as_str()) {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a headed CSV file; cells that do not parse as finite numbers are
/// recorded as missing.
pub fn ingest_csv(path: impl AsRef<Path>, target: &str) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, target).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// [`ingest_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(reader: R, target: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let columns: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push(record.iter().map(parse_cell).collect());
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    RawTable::new(columns, rows, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnBounds {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ColumnBounds {
    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    /// Maps to `[0, 1]`; constant columns map to 0.5.
    pub fn scale(&self, v: f64) -> f64 {
        if self.is_constant() {
            0.5
        } else {
            (v - self.min) / (self.max - self.min)
        }
    }

    pub fn unscale(&self, v: f64) -> f64 {
        if self.is_constant() {
            self.min
        } else {
            self.min + v * (self.max - self.min)
        }
    }

    fn of(name: &str, values: impl Iterator<Item = f64>) -> Self {
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self {
            name: name.to_string(),
            min,
            max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub rows_in: usize,
    pub rows_dropped: Vec<usize>,
    pub columns_dropped: Vec<DroppedColumn>,
    pub constant_columns: Vec<String>,
    pub feature_bounds: Vec<ColumnBounds>,
    pub target_bounds: Option<ColumnBounds>,
}

/// A complete, scaled regression dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanDataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub provenance: Provenance,
}

impl CleanDataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn problem(&self) -> Result<RegressionProblem> {
        RegressionProblem::new(self.x.clone(), self.y.clone())
    }

    /// Rows `idx` in order, keeping provenance.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            x: self.x.select_rows(idx.iter()),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            provenance: self.provenance.clone(),
        }
    }

    /// Back to a raw table with the target as the last column.
    pub fn to_raw_table(&self) -> RawTable {
        let mut columns = self.feature_names.clone();
        columns.push(self.target_name.clone());
        let rows = (0..self.n())
            .map(|i| {
                let mut row: Vec<Option<f64>> = self.x.row(i).iter().map(|v| Some(*v)).collect();
                row.push(Some(self.y[i]));
                row
            })
            .collect();
        RawTable {
            columns,
            rows,
            target: self.target_name.clone(),
        }
    }

    /// Writes the scaled data as CSV (features then target).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            row.push(self.y[i].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes the provenance record as pretty JSON.
    pub fn write_provenance(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.provenance)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// [`preprocess_with`] without manual column removal.
pub fn preprocess(table: &RawTable) -> Result<CleanDataset> {
    preprocess_with(table, &[])
}

/// Drops listed and sparse columns, then incomplete rows, then min-max scales.
pub fn preprocess_with(table: &RawTable, drop_columns: &[String]) -> Result<CleanDataset> {
    let target_idx = table.target_index();
    let n_rows = table.rows.len();
    let mut provenance = Provenance {
        rows_in: n_rows,
        ..Provenance::default()
    };

    if let Some(unknown) = drop_columns.iter().find(|c| !table.columns.contains(c)) {
        return Err(Error::Data(format!("cannot drop unknown column `{unknown}`")));
    }
    if drop_columns.contains(&table.target) {
        return Err(Error::Data("cannot drop the target column".into()));
    }

    let mut kept = Vec::new();
    for (j, name) in table.columns.iter().enumerate() {
        if j == target_idx {
            continue;
        }
        if drop_columns.contains(name) {
            provenance.columns_dropped.push(DroppedColumn {
                name: name.clone(),
                reason: "configured".into(),
            });
            continue;
        }
        let missing = table.rows.iter().filter(|r| r[j].is_none()).count();
        let fraction = missing as f64 / n_rows as f64;
        if fraction > MAX_MISSING_FRACTION {
            provenance.columns_dropped.push(DroppedColumn {
                name: name.clone(),
                reason: format!("{:.1}% missing", 100.0 * fraction),
            });
        } else {
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("no feature columns survive preprocessing".into()));
    }

    let mut complete = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        if row[target_idx].is_some() && kept.iter().all(|&j| row[j].is_some()) {
            complete.push(i);
        } else {
            provenance.rows_dropped.push(i);
        }
    }
    if complete.is_empty() {
        return Err(Error::Data("every row has a missing cell; dataset is empty".into()));
    }

    let cell = |i: usize, j: usize| table.rows[i][j].expect("complete row");
    let x = DMatrix::from_fn(complete.len(), kept.len(), |r, c| cell(complete[r], kept[c]));
    let y = DVector::from_fn(complete.len(), |r, _| cell(complete[r], target_idx));
    let feature_names = kept.iter().map(|&j| table.columns[j].clone()).collect();
    Ok(scale_dataset(feature_names, table.target.clone(), x, y, provenance))
}

fn scale_dataset(
    feature_names: Vec<String>,
    target_name: String,
    mut x: DMatrix<f64>,
    mut y: DVector<f64>,
    mut provenance: Provenance,
) -> CleanDataset {
    let names: &Vec<String> = &feature_names;
    for (j, name) in names.iter().enumerate() {
        let bounds = ColumnBounds::of(name, x.column(j).iter().copied());
        if bounds.is_constant() {
            provenance.constant_columns.push(name.clone());
        }
        for v in x.column_mut(j).iter_mut() {
            *v = bounds.scale(*v);
        }
        provenance.feature_bounds.push(bounds);
    }
    let tb = ColumnBounds::of(&target_name, y.iter().copied());
    if tb.is_constant() {
        provenance.constant_columns.push(target_name.clone());
    }
    y.iter_mut().for_each(|v| *v = tb.scale(*v));
    provenance.target_bounds = Some(tb);
    CleanDataset {
        feature_names,
        target_name,
        x,
        y,
        provenance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_informative: usize,
    pub n_features: usize,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_features == 0 || self.n_informative == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.n_informative > self.n_features {
            return Err(Error::Config(format!(
                "n_informative ({}) exceeds n_features ({})",
                self.n_informative, self.n_features
            )));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!(
            "synthetic-n{}-p{}-i{}-s{}",
            self.n_samples, self.n_features, self.n_informative, self.seed
        )
    }
}

/// Unscaled synthetic draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDraw {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// True weights; zero beyond the informative coordinates.
    pub weights: DVector<f64>,
}

/// Standard normal features, standard normal weights on the first
/// `n_informative` coordinates, Gaussian noise.
pub fn draw_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDraw> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let (n, p) = (spec.n_samples, spec.n_features);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let weights = DVector::from_fn(p, |j, _| {
        if j < spec.n_informative {
            rng.sample(StandardNormal)
        } else {
            0.0
        }
    });
    let mut y = &x * &weights;
    for v in y.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += spec.noise_sd * e;
    }
    Ok(SyntheticDraw { x, y, weights })
}

/// Synthetic dataset, min-max scaled like real data.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<CleanDataset> {
    let draw = draw_synthetic(spec)?;
    let names = (0..spec.n_features).map(|j| format!("x{j}")).collect();
    let provenance = Provenance {
        rows_in: spec.n_samples,
        ..Provenance::default()
    };
    Ok(scale_dataset(names, "y".into(), draw.x, draw.y, provenance))
}

/// Seeded permutation split: the first `⌊0.8 n⌋` rows train, the rest test.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Data(format!("need at least 5 rows to split, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded(seed));
    let n_train = n * 4 / 5;
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

pub fn split_80_20(dataset: &CleanDataset, seed: u64) -> Result<(CleanDataset, CleanDataset)> {
    let (train, test) = split_indices(dataset.n(), seed)?;
    Ok((dataset.select_rows(&train), dataset.select_rows(&test)))
}

/// Appends one JSON document per line.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = String::new();
    for item in items {
        buf.clear();
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
        w.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines file, skipping blank lines and lines for which `skip`
/// returns true (e.g. headers).
pub fn read_jsonl<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    skip: impl Fn(&serde_json::Value) -> bool,
) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if skip(&value) {
            continue;
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::fit_ols;
    use proptest::prelude::*;

    fn table(text: &str, target: &str) -> Result<RawTable> {
        read_csv(text.as_bytes(), target)
    }

    #[test]
    fn blank_cell_is_missing() {
        let t = table("a,b,y\n1,2,3\n4,,6\n7,8,9\n", "y").unwrap();
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.missing_count(), 1);
        assert_eq!(t.rows[1][1], None);
    }

    #[test]
    fn header_only_is_an_error() {
        assert!(matches!(table("a,b,y\n", "y"), Err(Error::Data(_))));
    }

    #[test]
    fn na_token_is_missing() {
        let t = table("a,y\nNA,1\nfoo,2\n3,?\n", "y").unwrap();
        assert_eq!(t.missing_count(), 3);
    }

    #[test]
    fn missing_target_column() {
        assert!(matches!(table("a,b\n1,2\n", "y"), Err(Error::Data(_))));
    }

    #[test]
    fn unreadable_file() {
        assert!(matches!(
            ingest_csv("/nonexistent/file.csv", "y"),
            Err(Error::Io { .. })
        ));
    }

    fn twenty_rows(missing_in_a: usize, missing_in_b: usize) -> RawTable {
        let rows = (0..20)
            .map(|i| {
                let a = (i >= missing_in_a).then_some(i as f64);
                let b = (i >= missing_in_b).then_some((i * i) as f64);
                vec![a, b, Some(2.0 * i as f64)]
            })
            .collect();
        RawTable::new(vec!["a".into(), "b".into(), "y".into()], rows, "y").unwrap()
    }

    #[test]
    fn sparse_column_is_dropped_rows_kept() {
        // 25% of `a` missing.
        let clean = preprocess(&twenty_rows(5, 0)).unwrap();
        assert_eq!(clean.feature_names, vec!["b".to_string()]);
        assert_eq!(clean.n(), 20);
        assert_eq!(clean.provenance.columns_dropped[0].name, "a");
    }

    #[test]
    fn lightly_missing_column_drops_rows() {
        // 10% of `a` missing.
        let clean = preprocess(&twenty_rows(2, 0)).unwrap();
        assert_eq!(clean.feature_names, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(clean.n(), 18);
        assert_eq!(clean.provenance.rows_dropped, vec![0, 1]);
    }

    #[test]
    fn exactly_twenty_percent_is_kept() {
        let clean = preprocess(&twenty_rows(4, 0)).unwrap();
        assert_eq!(clean.k(), 2);
        assert_eq!(clean.n(), 16);
    }

    #[test]
    fn constant_column_maps_to_half() {
        let t = table("a,c,y\n1,5,0\n2,5,1\n3,5,4\n", "y").unwrap();
        let clean = preprocess(&t).unwrap();
        assert!(clean.x.column(1).iter().all(|v| *v == 0.5));
        assert_eq!(clean.provenance.constant_columns, vec!["c".to_string()]);
        assert_eq!(clean.x.column(0).as_slice(), &[0.0, 0.5, 1.0]);
        assert_eq!(clean.y.as_slice(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn configured_drops() {
        let t = table("a,b,y\n1,2,3\n4,5,6\n", "y").unwrap();
        let clean = preprocess_with(&t, &["b".into()]).unwrap();
        assert_eq!(clean.feature_names, vec!["a".to_string()]);
        assert!(preprocess_with(&t, &["zzz".into()]).is_err());
        assert!(preprocess_with(&t, &["y".into()]).is_err());
    }

    #[test]
    fn all_rows_dropped_is_an_error() {
        let t = table("a,b,y\n1,,3\n,5,6\n4,5,\n7,8,\n", "y").unwrap();
        // a and b are 25% missing and dropped; the target removes the rest.
        assert!(preprocess(&t).is_err());
        let t = table("a,y\n1,\n2,\n", "y").unwrap();
        assert!(matches!(preprocess(&t), Err(Error::Data(_))));
    }

    #[test]
    fn preprocess_is_idempotent() {
        let clean = preprocess(&twenty_rows(2, 1)).unwrap();
        let again = preprocess(&clean.to_raw_table()).unwrap();
        assert_eq!(again.x, clean.x);
        assert_eq!(again.y, clean.y);
    }

    #[test]
    fn noiseless_synthetic_recovers_weights() {
        let spec = SyntheticSpec {
            n_samples: 50,
            n_informative: 4,
            n_features: 4,
            noise_sd: 0.0,
            seed: 3,
        };
        let draw = draw_synthetic(&spec).unwrap();
        let p = RegressionProblem::new(draw.x.clone(), draw.y.clone()).unwrap();
        let fit = fit_ols(&p).unwrap();
        for (b, w) in fit.beta.iter().zip(draw.weights.iter()) {
            assert!((b - w).abs() < 1e-8);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_scaled() {
        let spec = SyntheticSpec {
            n_samples: 40,
            n_informative: 2,
            n_features: 5,
            noise_sd: 0.1,
            seed: 9,
        };
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        assert!(draw_synthetic(&spec).unwrap().weights.iter().skip(2).all(|w| *w == 0.0));
        for j in 0..a.k() {
            let col = a.x.column(j);
            assert_eq!(col.min(), 0.0);
            assert_eq!(col.max(), 1.0);
        }
        assert!(make_synthetic(&SyntheticSpec {
            n_informative: 6,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_indices(10, 0).unwrap().0.len(), 8);
        assert_eq!(split_indices(5, 0).unwrap().0.len(), 4);
        assert_eq!(split_indices(5, 0).unwrap().1.len(), 1);
        assert!(split_indices(4, 0).is_err());
        assert_eq!(split_indices(50, 1).unwrap(), split_indices(50, 1).unwrap());
        assert_ne!(split_indices(50, 1).unwrap(), split_indices(50, 2).unwrap());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        append_jsonl(&path, &[serde_json::json!({"header": 1})]).unwrap();
        append_jsonl(
            &path,
            &[ColumnBounds {
                name: "a".into(),
                min: 0.1,
                max: 0.3,
            }],
        )
        .unwrap();
        let back: Vec<ColumnBounds> = read_jsonl(&path, |v| v.get("header").is_some()).unwrap();
        assert_eq!(
            back,
            vec![ColumnBounds {
                name: "a".into(),
                min: 0.1,
                max: 0.3
            }]
        );
    }

    proptest! {
        #[test]
        fn scaling_inverts(values in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
            let bounds = ColumnBounds::of("c", values.iter().copied());
            prop_assume!(!bounds.is_constant());
            for v in &values {
                let back = bounds.unscale(bounds.scale(*v));
                prop_assert!((back - v).abs() <= 1e-12 * (1.0 + v.abs().max(bounds.max.abs()).max(bounds.min.abs())));
            }
        }

        #[test]
        fn split_is_a_partition(n in 5usize..200, seed in any::<u64>()) {
            let (train, test) = split_indices(n, seed).unwrap();
            prop_assert_eq!(train.len(), n * 4 / 5);
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
