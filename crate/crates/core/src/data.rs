//! Labeled datasets, the label-overlap similarity predicate, synthetic data,
//! query/database/train splits and the on-disk formats for all of them.
//!
//! Binary feature files are a 16-byte header followed by row-major
//! little-endian `f32` values:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `b"TQFT"`       |
//! | 4      | 4    | version (`u32`, = 1)  |
//! | 8      | 4    | row count N (`u32`)   |
//! | 12     | 4    | dimension D (`u32`)   |

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::Matrix;

pub const FEATURES_MAGIC: [u8; 4] = *b"TQFT";
pub const FEATURES_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Raw feature vectors with their label sets and stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<Vec<u32>>,
    ids: Vec<String>,
}

impl LabeledDataset {
    /// Validates the dataset invariants. Label sets are sorted and deduplicated.
    pub fn new(features: Matrix, mut labels: Vec<Vec<u32>>, ids: Vec<String>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || ids.len() != n {
            return Err(arg_err!(
                "dataset has {n} feature rows, {} label sets and {} ids",
                labels.len(),
                ids.len()
            ));
        }
        for (row, l) in labels.iter_mut().enumerate() {
            if l.is_empty() {
                return Err(Error::Data {
                    row,
                    msg: "item has no labels".into(),
                });
            }
            l.sort_unstable();
            l.dedup();
        }
        check_finite(&features)?;
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    /// Uses the row index as the identifier of every item.
    pub fn with_index_ids(features: Matrix, labels: Vec<Vec<u32>>) -> Result<Self> {
        let ids = (0..features.rows()).map(|i| format!("item-{i:06}")).collect();
        Self::new(features, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Vec<u32>] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn similarity(&self) -> Similarity<'_> {
        Similarity {
            labels: &self.labels,
        }
    }

    /// Reads `features.bin` (or `features.csv`), `labels.txt` and, when present,
    /// `ids.txt` from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let bin = dir.join("features.bin");
        let features = if bin.exists() {
            load_features(&bin, FeatureFormat::Binary)?
        } else {
            load_features(&dir.join("features.csv"), FeatureFormat::Csv)?
        };
        let labels = load_labels(&dir.join("labels.txt"))?;
        let ids_path = dir.join("ids.txt");
        if ids_path.exists() {
            let ids = fs::read_to_string(ids_path)?
                .lines()
                .map(str::to_owned)
                .collect();
            Self::new(features, labels, ids)
        } else {
            Self::with_index_ids(features, labels)
        }
    }

    pub fn save_dir(&self, dir: &Path, format: FeatureFormat) -> Result<()> {
        fs::create_dir_all(dir)?;
        match format {
            FeatureFormat::Binary => save_features(&dir.join("features.bin"), &self.features)?,
            FeatureFormat::Csv => save_features_csv(&dir.join("features.csv"), &self.features)?,
        }
        save_labels(&dir.join("labels.txt"), &self.labels)?;
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        fs::write(dir.join("ids.txt"), ids)?;
        Ok(())
    }
}

/// Two items are similar iff their label sets intersect.
#[derive(Debug, Clone, Copy)]
pub struct Similarity<'a> {
    labels: &'a [Vec<u32>],
}

impl<'a> Similarity<'a> {
    /// Label sets must be sorted ascending.
    pub fn new(labels: &'a [Vec<u32>]) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checked form: fails on an out-of-range index.
    pub fn get(&self, i: usize, j: usize) -> Result<bool> {
        let len = self.labels.len();
        for index in [i, j] {
            if index >= len {
                return Err(Error::Index { index, len });
            }
        }
        Ok(self.similar(i, j))
    }

    /// Unchecked form used in hot loops; panics on an out-of-range index.
    #[inline]
    pub fn similar(&self, i: usize, j: usize) -> bool {
        sorted_intersect(&self.labels[i], &self.labels[j])
    }
}

fn sorted_intersect(a: &[u32], b: &[u32]) -> bool {
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Equal => return true,
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
        }
    }
    false
}

/// Gaussian blobs around centers drawn uniformly from `[0, 10]^d`.
///
/// Rows are cluster-major: rows `c * per_cluster .. (c + 1) * per_cluster`
/// belong to cluster `c` and carry the single label `c`.
pub fn make_synthetic(
    n_clusters: usize,
    per_cluster: usize,
    d: usize,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_clusters < 2 {
        return Err(arg_err!("need at least 2 clusters, got {n_clusters}"));
    }
    if per_cluster < 1 || d < 1 {
        return Err(arg_err!("per_cluster and dimension must be positive"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(arg_err!("sigma must be a finite non-negative number, got {sigma}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..d).map(|_| 10.0 * rng.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, sigma).expect("sigma validated above");
    let n = n_clusters * per_cluster;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for p in 0..per_cluster {
            let row = features.row_mut(c * per_cluster + p);
            for (v, mu) in row.iter_mut().zip(center) {
                *v = mu + noise.sample(&mut rng);
            }
            labels.push(vec![c as u32]);
        }
    }
    LabeledDataset::with_index_ids(features, labels)
}

/// Query, database and training index sets. `train` is drawn from `database`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub query: Vec<usize>,
    pub database: Vec<usize>,
    pub train: Vec<usize>,
}

impl DatasetSplit {
    /// Uniform sampling without replacement. All index lists are sorted.
    pub fn sample(n_items: usize, n_query: usize, n_train: usize, seed: u64) -> Result<Self> {
        if n_query + 1 > n_items {
            return Err(arg_err!(
                "{n_query} queries leave an empty database out of {n_items} items"
            ));
        }
        if n_train > n_items - n_query {
            return Err(arg_err!(
                "{n_train} training items exceed the database size {}",
                n_items - n_query
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng);
        let mut query = order[..n_query].to_vec();
        let mut database = order[n_query..].to_vec();
        let mut train: Vec<usize> = database
            .choose_multiple(&mut rng, n_train)
            .copied()
            .collect();
        query.sort_unstable();
        database.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            query,
            database,
            train,
        })
    }

    /// Checks the split against a dataset of `n_items` rows.
    pub fn validate(&self, n_items: usize) -> Result<()> {
        let mut in_db = vec![false; n_items];
        for &i in self.query.iter().chain(&self.database).chain(&self.train) {
            if i >= n_items {
                return Err(Error::Index {
                    index: i,
                    len: n_items,
                });
            }
        }
        for &i in &self.database {
            in_db[i] = true;
        }
        if self.query.iter().any(|&q| in_db[q]) {
            return Err(arg_err!("query and database sets overlap"));
        }
        if self.train.iter().any(|&t| !in_db[t]) {
            return Err(arg_err!("training set is not a subset of the database"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("split serialization: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` selects CSV; anything else is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<Matrix> {
    match format {
        FeatureFormat::Binary => decode_features(&fs::read(path)?),
        FeatureFormat::Csv => parse_features_csv(&fs::read_to_string(path)?),
    }
}

/// Decodes the binary feature layout from an in-memory buffer.
pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "feature file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != FEATURES_MAGIC {
        return Err(Error::Format("bad feature file magic".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURES_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {n}x{d} f32 = {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m = Matrix::from_vec(n, d, data)?;
    check_finite(&m)?;
    Ok(m)
}

/// Encodes a matrix in the binary feature layout. Values are narrowed to `f32`.
pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 4);
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn save_features(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_features(m))?;
    Ok(())
}

pub fn parse_features_csv(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    let mut cols = None;
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|e| Error::Data {
                    row,
                    msg: format!("cannot parse {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(values.len()),
            Some(c) if c != values.len() => {
                return Err(Error::Format(format!(
                    "row {row} has {} columns, expected {c}",
                    values.len()
                )))
            }
            _ => {}
        }
        rows.push(values);
    }
    let m = Matrix::from_rows(&rows, cols.unwrap_or(0))?;
    check_finite(&m)?;
    Ok(m)
}

pub fn save_features_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// One line per item, whitespace-separated non-negative integer label ids.
pub fn load_labels(path: &Path) -> Result<Vec<Vec<u32>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut labels = Vec::new();
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        let set = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|e| Error::Data {
                    row,
                    msg: format!("bad label {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        labels.push(set);
    }
    Ok(labels)
}

pub fn save_labels(path: &Path, labels: &[Vec<u32>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for set in labels {
        let line: Vec<String> = set.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

fn check_finite(m: &Matrix) -> Result<()> {
    for (row, r) in m.iter_rows().enumerate() {
        if let Some(v) = r.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data {
                row,
                msg: format!("non-finite value {v}"),
            });
        }
    }
    Ok(())
}
