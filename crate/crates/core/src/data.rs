//! Synthetic datasets, CSV files and per-feature normalisation.
//!
//! CSV layout: an optional first line `# provenance {json}`, then a header
//! row. Columns starting with `y_` are one-hot labels, columns starting with
//! `z_` are ground-truth factors, everything else is a feature.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

const PROVENANCE_PREFIX: &str = "# provenance ";
const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: serde_json::Value,
}

impl Provenance {
    fn external(what: &str) -> Self {
        Self {
            generator: what.to_string(),
            seed: None,
            params: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// One-hot class labels.
    pub labels: Option<Array2<f64>>,
    /// Ground-truth generative factors.
    pub factors: Option<Array2<f64>>,
    /// Column names: features, then `y_*`, then `z_*`.
    pub schema: Vec<String>,
    pub provenance: Provenance,
}

fn default_schema(d: usize, c: usize, k: usize) -> Vec<String> {
    (0..d)
        .map(|i| format!("x_{i}"))
        .chain((0..c).map(|i| format!("y_{i}")))
        .chain((0..k).map(|i| format!("z_{i}")))
        .collect()
}

impl Dataset {
    /// Builds a dataset with default column names and validates it.
    pub fn new(
        features: Array2<f64>,
        labels: Option<Array2<f64>>,
        factors: Option<Array2<f64>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let schema = default_schema(
            features.ncols(),
            labels.as_ref().map_or(0, |l| l.ncols()),
            factors.as_ref().map_or(0, |f| f.ncols()),
        );
        let ds = Self {
            features,
            labels,
            factors,
            schema,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut width = self.features.ncols();
        for (name, m) in [("labels", &self.labels), ("factors", &self.factors)] {
            if let Some(m) = m {
                if m.nrows() != n {
                    return Err(Error::Data(format!("{name} have {} rows, features {n}", m.nrows())));
                }
                width += m.ncols();
            }
        }
        if self.schema.len() != width {
            return Err(Error::Data(format!(
                "schema names {} columns, data has {width}",
                self.schema.len()
            )));
        }
        let check = |m: &Array2<f64>, what: &str| -> Result<()> {
            if let Some(((r, c), _)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite {what} value at row {r}, column {c}")));
            }
            Ok(())
        };
        check(&self.features, "feature")?;
        if let Some(f) = &self.factors {
            check(f, "factor")?;
        }
        if let Some(labels) = &self.labels {
            check(labels, "label")?;
            for (r, row) in labels.rows().into_iter().enumerate() {
                let binary = row.iter().all(|&v| v == 0.0 || v == 1.0);
                if !binary || row.sum() != 1.0 {
                    return Err(Error::Data(format!("label row {r} is not one-hot")));
                }
            }
        }
        Ok(())
    }

    /// Class index of every row, if labelled.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            l.rows()
                .into_iter()
                .map(|row| row.iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect()
        })
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels: self.labels.as_ref().map(|l| l.select(Axis(0), indices)),
            factors: self.factors.as_ref().map(|f| f.select(Axis(0), indices)),
            schema: self.schema.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Seeded shuffle, then the first `round(test_fraction · n)` rows become
    /// the test set. Returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Data(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        Ok((self.subset(&idx[n_test..]), self.subset(&idx[..n_test])))
    }
}

fn one_hot(classes: &[usize], k: usize) -> Array2<f64> {
    let mut m = Array2::zeros((classes.len(), k));
    for (r, &c) in classes.iter().enumerate() {
        m[[r, c]] = 1.0;
    }
    m
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::Data(format!("noise sigma {sigma}: {e}")))
}

/// Points near the corners of the unit square labelled by XOR.
///
/// Classes alternate row by row and each class alternates between its two
/// corners, so `n = 4` with no noise yields the four corners exactly.
pub fn gen_xor(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Data(format!("xor needs at least 4 points, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Data(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = normal(noise_sigma)?;
    let corners = [[[0.0, 0.0], [1.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]];
    let mut features = Array2::zeros((n, 2));
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let corner = corners[i % 2][(i / 2) % 2];
        let x = corner[0] + jitter.sample(&mut rng);
        let y = corner[1] + jitter.sample(&mut rng);
        features[[i, 0]] = x;
        features[[i, 1]] = y;
        classes.push(((x.round() != 0.0) ^ (y.round() != 0.0)) as usize);
    }
    Dataset::new(
        features,
        Some(one_hot(&classes, 2)),
        None,
        Provenance {
            generator: "xor".into(),
            seed: Some(seed),
            params: json!({"n": n, "noise_sigma": noise_sigma}),
        },
    )
}

/// `k` isotropic Gaussians in `d` dimensions with pairwise mean distance at
/// least `separation`. Means are placed by rejection sampling in a cube of
/// side `separation · k^(1/d)`; rows cycle through the clusters.
pub fn gen_gaussian_clusters(
    k: usize,
    d: usize,
    n_per_cluster: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if k == 0 || d == 0 || n_per_cluster == 0 {
        return Err(Error::Data("k, d and n_per_cluster must all be at least 1".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Data(format!("separation must be > 0, got {separation}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Data(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = separation * (k as f64).powf(1.0 / d as f64) / 2.0;
    let box_dist = Uniform::new_inclusive(-half, half).map_err(|e| Error::Data(e.to_string()))?;
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while means.len() < k {
        if attempts == PLACEMENT_ATTEMPTS * k {
            return Err(Error::Data(format!(
                "could not place {k} clusters {separation} apart in {d} dimensions"
            )));
        }
        attempts += 1;
        let candidate = Array1::from_iter((0..d).map(|_| box_dist.sample(&mut rng)));
        let far = means.iter().all(|m| {
            let diff = m - &candidate;
            diff.dot(&diff).sqrt() >= separation
        });
        if far {
            means.push(candidate);
        }
    }
    let n = k * n_per_cluster;
    let mut features = Array2::zeros((n, d));
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[i, j]] = means[c][j] + sigma * z;
        }
        classes.push(c);
    }
    let mean_rows: Vec<Vec<f64>> = means.iter().map(|m| m.to_vec()).collect();
    Dataset::new(
        features,
        Some(one_hot(&classes, k)),
        None,
        Provenance {
            generator: "gaussian_clusters".into(),
            seed: Some(seed),
            params: json!({
                "k": k, "d": d, "n_per_cluster": n_per_cluster,
                "separation": separation, "sigma": sigma, "means": mean_rows,
            }),
        },
    )
}

pub const TWO_FACTOR_DIM: usize = 8;

/// Two uniform factors on [-1, 1] mapped to 8 observations by
/// `x = relu(A z)` with a standard-normal 8×2 matrix `A`. The map is kept in
/// the provenance under `"map"`.
pub fn gen_two_factor(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Data("two-factor data needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = Array2::from_shape_fn((TWO_FACTOR_DIM, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let unit = Uniform::new_inclusive(-1.0, 1.0).map_err(|e| Error::Data(e.to_string()))?;
    let factors = Array2::from_shape_fn((n, 2), |_| unit.sample(&mut rng));
    let features = two_factor_observations(&map, &factors);
    let map_rows: Vec<Vec<f64>> = map.rows().into_iter().map(|r| r.to_vec()).collect();
    Dataset::new(
        features,
        None,
        Some(factors),
        Provenance {
            generator: "two_factor".into(),
            seed: Some(seed),
            params: json!({"n": n, "map": map_rows}),
        },
    )
}

/// `relu(z Aᵀ)` row by row.
pub fn two_factor_observations(map: &Array2<f64>, factors: &Array2<f64>) -> Array2<f64> {
    factors.dot(&map.t()).mapv(|v| v.max(0.0))
}

/// Reads the generating map back from a two-factor dataset's provenance.
pub fn two_factor_map(dataset: &Dataset) -> Option<Array2<f64>> {
    let rows: Vec<Vec<f64>> = serde_json::from_value(dataset.provenance.params.get("map")?.clone()).ok()?;
    let cols = rows.first()?.len();
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).ok()
}

fn write_row(out: &mut String, values: impl Iterator<Item = f64>) {
    let cells: Vec<String> = values.map(|v| v.to_string()).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

/// CSV text for a dataset, shortest round-trip decimals throughout.
pub fn to_csv(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    let mut out = String::new();
    out.push_str(PROVENANCE_PREFIX);
    out.push_str(&serde_json::to_string(&dataset.provenance).map_err(|e| Error::Data(e.to_string()))?);
    out.push('\n');
    out.push_str(&dataset.schema.join(","));
    out.push('\n');
    for r in 0..dataset.len() {
        let features = dataset.features.row(r).to_vec();
        let labels = dataset.labels.as_ref().map_or(vec![], |l| l.row(r).to_vec());
        let factors = dataset.factors.as_ref().map_or(vec![], |f| f.row(r).to_vec());
        write_row(&mut out, features.into_iter().chain(labels).chain(factors));
    }
    Ok(out)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv(dataset)?)?;
    Ok(())
}

/// Parses CSV text. Column roles come from the header prefixes.
pub fn from_csv(text: &str) -> Result<Dataset> {
    let (provenance, body, line_offset) = match text.strip_prefix(PROVENANCE_PREFIX) {
        Some(rest) => {
            let (first, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let provenance: Provenance = serde_json::from_str(first.trim_end()).map_err(|e| Error::Csv {
                line: 1,
                message: format!("bad provenance line: {e}"),
            })?;
            (provenance, body, 1u64)
        }
        None => (Provenance::external("csv"), text, 0u64),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(body.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: line_offset + 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Csv {
            line: line_offset + 1,
            message: "missing header row".into(),
        });
    }
    let role = |name: &str| {
        if name.starts_with("y_") {
            1
        } else if name.starts_with("z_") {
            2
        } else {
            0
        }
    };
    let mut columns: [Vec<usize>; 3] = Default::default();
    for (i, name) in header.iter().enumerate() {
        columns[role(name)].push(i);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()) + line_offset,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line()) + line_offset;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.trim().parse::<f64>().map_err(|_| Error::Csv {
                    line,
                    message: format!("column {}: not a number: {cell:?}", header[c]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    let take = |cols: &[usize]| Array2::from_shape_fn((n, cols.len()), |(r, c)| rows[r][cols[c]]);
    let features = take(&columns[0]);
    let labels = (!columns[1].is_empty()).then(|| take(&columns[1]));
    let factors = (!columns[2].is_empty()).then(|| take(&columns[2]));
    let schema = columns.iter().flatten().map(|&i| header[i].clone()).collect();
    let ds = Dataset {
        features,
        labels,
        factors,
        schema,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    from_csv(&fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    None,
    Standardize,
    Minmax,
}

/// Per-feature affine map `x' = (x − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mode: NormalizationMode,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl NormalizationParams {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let shift = Array1::from(self.shift.clone());
        let scale = Array1::from(self.scale.clone());
        (x - &shift) / &scale
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Array2<f64> {
        let shift = Array1::from(self.shift.clone());
        let scale = Array1::from(self.scale.clone());
        x * &scale + &shift
    }
}

/// Normalises features column by column. Standardisation uses the
/// population variance. Constant columns are passed through unchanged and
/// noted in `warnings`.
pub fn normalize(dataset: &Dataset, mode: NormalizationMode) -> Result<(Dataset, NormalizationParams)> {
    let x = &dataset.features;
    let (n, d) = x.dim();
    let mut params = NormalizationParams {
        mode,
        shift: vec![0.0; d],
        scale: vec![1.0; d],
        warnings: vec![],
    };
    match mode {
        NormalizationMode::None => {}
        NormalizationMode::Standardize => {
            if n < 2 {
                return Err(Error::Data("standardisation needs at least 2 rows".into()));
            }
            for (j, col) in x.columns().into_iter().enumerate() {
                let mean = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                if var == 0.0 {
                    params.warnings.push(format!("column {} has zero variance; left unchanged", dataset.schema[j]));
                } else {
                    params.shift[j] = mean;
                    params.scale[j] = var.sqrt();
                }
            }
        }
        NormalizationMode::Minmax => {
            for (j, col) in x.columns().into_iter().enumerate() {
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(hi > lo) {
                    params.warnings.push(format!("column {} is constant; left unchanged", dataset.schema[j]));
                } else {
                    params.shift[j] = lo;
                    params.scale[j] = hi - lo;
                }
            }
        }
    }
    let mut out = dataset.clone();
    out.features = params.apply(x);
    Ok((out, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn xor_corners() {
        let ds = gen_xor(4, 0.0, 1).unwrap();
        assert_eq!(ds.features, array![[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert_eq!(ds.classes().unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn xor_balance_and_determinism() {
        let a = gen_xor(1000, 0.05, 3).unwrap();
        let ones = a.classes().unwrap().iter().filter(|&&c| c == 1).count();
        assert!((499..=501).contains(&ones));
        assert_eq!(a, gen_xor(1000, 0.05, 3).unwrap());
        assert!(gen_xor(10, -0.1, 0).is_err());
        assert!(gen_xor(3, 0.0, 0).is_err());
    }

    #[test]
    fn clusters_degenerate_cases() {
        let one = gen_gaussian_clusters(1, 3, 10, 1.0, 0.5, 0).unwrap();
        assert!(one.classes().unwrap().iter().all(|&c| c == 0));
        let flat = gen_gaussian_clusters(3, 2, 5, 4.0, 0.0, 2).unwrap();
        for (i, row) in flat.features.rows().into_iter().enumerate() {
            assert_eq!(row, flat.features.row(i % 3));
        }
        assert!(gen_gaussian_clusters(200, 1, 1, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn two_factor_consistency() {
        let ds = gen_two_factor(50, 7).unwrap();
        let map = two_factor_map(&ds).unwrap();
        assert_eq!(two_factor_observations(&map, ds.factors.as_ref().unwrap()), ds.features);
        assert_eq!(ds, gen_two_factor(50, 7).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_xor(4, 0.0, 1).unwrap();
        assert_eq!(from_csv(&to_csv(&ds).unwrap()).unwrap(), ds);
        let noisy = gen_two_factor(20, 1).unwrap();
        assert_eq!(from_csv(&to_csv(&noisy).unwrap()).unwrap(), noisy);
    }

    #[test]
    fn csv_errors_carry_line() {
        let err = from_csv("a,b\n1,2\n3,abc\n").unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err:?}");
        let err = from_csv("a,b\n1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err:?}");
        let ds = from_csv("a,b\n1,2\n").unwrap();
        assert!(ds.labels.is_none());
    }

    #[test]
    fn standardize_and_inverse() {
        let ds = gen_gaussian_clusters(2, 3, 20, 5.0, 1.0, 4).unwrap();
        let (norm, params) = normalize(&ds, NormalizationMode::Standardize).unwrap();
        for col in norm.features.columns() {
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-12);
        }
        let back = params.inverse(&norm.features);
        assert!((&back - &ds.features).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn constant_column_passthrough() {
        let ds = Dataset::new(array![[1.0, 5.0], [2.0, 5.0]], None, None, Provenance::external("t")).unwrap();
        let (norm, params) = normalize(&ds, NormalizationMode::Minmax).unwrap();
        assert_eq!(norm.features.column(1), ds.features.column(1));
        assert_eq!(params.warnings.len(), 1);
    }
}
