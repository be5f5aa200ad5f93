//! Feature datasets: CSV/binary loading, class-id splits, and the
//! synthetic Gaussian-cluster generator used for desk-scale benchmarks.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Immutable dataset of feature vectors with class labels and train/test
/// tags. Labels must be contiguous from zero.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub splits: Vec<Split>,
    pub class_index: BTreeMap<u32, Vec<usize>>,
}

impl FeatureDataset {
    pub fn new(features: Matrix, labels: Vec<u32>, splits: Vec<Split>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || splits.len() != n {
            return Err(Error::Dataset(format!(
                "{} rows vs {} labels / {} split tags",
                n,
                labels.len(),
                splits.len()
            )));
        }
        features.check_finite("dataset features")?;
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        if let Some(&max) = class_index.keys().max() {
            for c in 0..=max {
                if !class_index.contains_key(&c) {
                    return Err(Error::Dataset(format!(
                        "label gap: class {c} has no samples"
                    )));
                }
            }
        }
        Ok(FeatureDataset {
            features,
            labels,
            splits,
            class_index,
        })
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

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    /// Sample indices of one class, optionally restricted to a split.
    pub fn indices_of(&self, class: u32, split: Option<Split>) -> Vec<usize> {
        self.class_index
            .get(&class)
            .map(|idx| {
                idx.iter()
                    .copied()
                    .filter(|&i| split.is_none_or(|s| self.splits[i] == s))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// New dataset restricted to the given classes, labels preserved.
    pub fn restrict_to_classes(&self, classes: &[u32]) -> Result<FeatureDataset> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let features = self.features.select_rows(&keep);
        let labels = keep.iter().map(|&i| self.labels[i]).collect();
        let splits = keep.iter().map(|&i| self.splits[i]).collect();
        // bypass the gap check: restricted sets keep their original ids
        let mut ds = FeatureDataset {
            features,
            labels,
            splits,
            class_index: BTreeMap::new(),
        };
        ds.rebuild_index();
        Ok(ds)
    }

    fn rebuild_index(&mut self) {
        self.class_index.clear();
        for (i, &l) in self.labels.iter().enumerate() {
            self.class_index.entry(l).or_default().push(i);
        }
    }
}

/// Disjoint class-id sets for the base/validation/novel division.
#[derive(Debug, Clone, Default)]
pub struct SplitConfig {
    pub base_class_ids: Vec<u32>,
    pub validation_ids: Vec<u32>,
    pub novel_pool_ids: Vec<u32>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .base_class_ids
            .iter()
            .chain(&self.validation_ids)
            .chain(&self.novel_pool_ids)
        {
            if !seen.insert(*id) {
                return Err(Error::Config(format!(
                    "class id {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Partition a dataset into (base, validation, novel-pool) by class id.
pub fn split(
    dataset: &FeatureDataset,
    cfg: &SplitConfig,
) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    cfg.validate()?;
    Ok((
        dataset.restrict_to_classes(&cfg.base_class_ids)?,
        dataset.restrict_to_classes(&cfg.validation_ids)?,
        dataset.restrict_to_classes(&cfg.novel_pool_ids)?,
    ))
}

/// Isotropic Gaussian clusters around random unit-sphere centers;
/// per class, `per_class_train` train rows then `per_class_test` test rows.
/// `cluster_spread` is the expected noise norm relative to the unit-norm
/// centers (per-dimension standard deviation `spread / sqrt(d)`), so the
/// difficulty of a given spread is comparable across dimensionalities.
pub fn generate_synthetic(
    n_classes: usize,
    d: usize,
    per_class_train: usize,
    per_class_test: usize,
    cluster_spread: f64,
    rng: &mut impl Rng,
) -> Result<FeatureDataset> {
    if n_classes == 0 || d == 0 || per_class_train == 0 || per_class_test == 0 {
        return Err(Error::InvalidArgument("all counts must be >= 1".into()));
    }
    if !cluster_spread.is_finite() || cluster_spread <= 0.0 {
        return Err(Error::InvalidArgument("cluster_spread must be > 0".into()));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise_sd = cluster_spread / (d as f64).sqrt();
    let per_class = per_class_train + per_class_test;
    let mut features = Matrix::zeros(n_classes * per_class, d);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    let mut splits = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let mut center: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut center {
            *v /= norm;
        }
        for s in 0..per_class {
            let row = c * per_class + s;
            for (j, &cj) in center.iter().enumerate() {
                features.set(row, j, cj + noise_sd * normal.sample(rng));
            }
            labels.push(c as u32);
            splits.push(if s < per_class_train {
                Split::Train
            } else {
                Split::Test
            });
        }
    }
    FeatureDataset::new(features, labels, splits)
}

pub const DEFAULT_CLUSTER_SPREAD: f64 = 0.3;

const BIN_MAGIC: &[u8; 4] = b"GFD1";

pub fn save_binary(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(BIN_MAGIC)?;
    buf.write_all(&(ds.len() as u32).to_le_bytes())?;
    buf.write_all(&(ds.dim() as u32).to_le_bytes())?;
    for v in ds.features.as_slice() {
        buf.write_all(&v.to_le_bytes())?;
    }
    for l in &ds.labels {
        buf.write_all(&l.to_le_bytes())?;
    }
    for s in &ds.splits {
        buf.push(match s {
            Split::Train => 0,
            Split::Test => 1,
        });
    }
    crate::report::atomic_write(path, &buf)
}

pub fn load_binary(path: &Path) -> Result<FeatureDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let fail = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if buf.len() < 12 || &buf[..4] != BIN_MAGIC {
        return Err(fail("malformed header"));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let expected = 12 + n * d * 8 + n * 4 + n;
    if buf.len() != expected {
        return Err(fail(&format!(
            "size mismatch: expected {expected} bytes, found {}",
            buf.len()
        )));
    }
    let mut pos = 12;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap()));
        pos += 8;
    }
    let features = Matrix::from_vec(n, d, data).map_err(|_| fail("non-finite feature value"))?;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()));
        pos += 4;
    }
    let mut splits = Vec::with_capacity(n);
    for _ in 0..n {
        splits.push(match buf[pos] {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(fail(&format!("bad split tag {other}"))),
        });
        pos += 1;
    }
    FeatureDataset::new(features, labels, splits).map_err(|e| fail(&e.to_string()))
}

/// CSV schema: header `f0..f{d-1},label,split`, split is `train` or `test`.
pub fn load_csv(path: &Path) -> Result<FeatureDataset> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| fail("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "split" {
        return Err(fail(
            "malformed header: expected f0..f{d-1},label,split".into(),
        ));
    }
    let d = cols.len() - 2;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(fail(format!("row {}: wrong field count", lineno + 2)));
        }
        let mut row = Vec::with_capacity(d);
        for f in &fields[..d] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| fail(format!("row {}: bad float {f:?}", lineno + 2)))?;
            row.push(v);
        }
        rows.push(row);
        labels.push(
            fields[d]
                .trim()
                .parse()
                .map_err(|_| fail(format!("row {}: bad label", lineno + 2)))?,
        );
        splits.push(match fields[d + 1].trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(fail(format!("row {}: bad split {other:?}", lineno + 2))),
        });
    }
    let features = Matrix::from_rows(&rows).map_err(|e| fail(e.to_string()))?;
    FeatureDataset::new(features, labels, splits)
}

pub fn save_csv(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label,split\n");
    for i in 0..ds.len() {
        for v in ds.features.row(i) {
            // round-trippable float formatting
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!(
            "{},{}\n",
            ds.labels[i],
            match ds.splits[i] {
                Split::Train => "train",
                Split::Test => "test",
            }
        ));
    }
    crate::report::atomic_write(path, out.as_bytes())
}
