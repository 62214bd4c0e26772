//! Datasets: IDX and CSV loaders, synthetic Gaussian blobs, dev splits and
//! standardization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::learners::LabeledBatch;
use crate::seed;
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Dense feature matrix with 0-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize, name: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} feature rows but {} labels", features.nrows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Range { value: bad as i64, what: format!("label < {n_classes}") });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("features must be finite".into()));
        }
        Ok(Self { features, labels, n_classes, name: name.into() })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn batch(&self) -> LabeledBatch<'_> {
        LabeledBatch { features: self.features.view(), labels: &self.labels }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            name: self.name.clone(),
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Widen the label space, e.g. to align a test set with its train set.
    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Dataset> {
        if n_classes < self.n_classes {
            return Err(Error::InvalidConfig(format!("cannot shrink {} classes to {n_classes}", self.n_classes)));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    /// Write as CSV with header `f0,..,f{d-1},<label_column>`.
    pub fn write_csv<W: Write>(&self, sink: W, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("f{j}")).collect();
        header.push(label_column.to_string());
        w.write_record(&header)?;
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(path.to_path_buf()))
}

/// Load an IDX image/label file pair (the MNIST distribution format).
/// Pixels are scaled to `[0, 1]` and images flattened row-major.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset> {
    let (image_path, label_path) = (image_path.as_ref(), label_path.as_ref());
    let images = read_file(image_path)?;
    let labels = read_file(label_path)?;

    let magic = be_u32(&images, 0, image_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic { path: image_path.to_path_buf(), expected: IDX_IMAGE_MAGIC, found: magic });
    }
    let magic = be_u32(&labels, 0, label_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic { path: label_path.to_path_buf(), expected: IDX_LABEL_MAGIC, found: magic });
    }

    let n_images = be_u32(&images, 4, image_path)? as usize;
    let rows = be_u32(&images, 8, image_path)? as usize;
    let cols = be_u32(&images, 12, image_path)? as usize;
    let n_labels = be_u32(&labels, 4, label_path)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch { images: n_images, labels: n_labels });
    }
    let dims = rows * cols;
    let pixels = images.get(16..16 + n_images * dims).ok_or_else(|| Error::TruncatedFile(image_path.to_path_buf()))?;
    let raw_labels = labels.get(8..8 + n_labels).ok_or_else(|| Error::TruncatedFile(label_path.to_path_buf()))?;

    let features = Array2::from_shape_vec((n_images, dims), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("length checked above");
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = image_path.file_name().map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(features, labels, n_classes, name)
}

/// Original label value -> dense 0-based index, in ascending label order.
pub type LabelMap = BTreeMap<i64, usize>;

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<(Dataset, LabelMap)> {
    let path = path.as_ref();
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |n| n.to_string_lossy().into_owned());
    let (mut d, map) = read_csv(fs::File::open(path)?, label_column)?;
    d.name = name;
    Ok((d, map))
}

/// Parse a headered CSV. Every column other than `label_column` is a
/// feature, in header order. Labels are remapped densely.
pub fn read_csv<R: Read>(source: R, label_column: &str) -> Result<(Dataset, LabelMap)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let header = reader.headers()?.clone();
    let label_idx =
        header.iter().position(|h| h == label_column).ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;
    let dims = header.len() - 1;

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("row has {} fields, header has {}", record.len(), header.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let column = &header[j];
            if j == label_idx {
                let label: i64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label column {column:?}: {cell:?} is not an integer"),
                })?;
                raw_labels.push(label);
            } else {
                let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column {column:?}: {cell:?} is not a finite number"),
                })?;
                values.push(v);
            }
        }
    }

    let mut map = LabelMap::new();
    for &l in &raw_labels {
        map.insert(l, 0);
    }
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    let labels: Vec<usize> = raw_labels.iter().map(|l| map[l]).collect();
    let features = Array2::from_shape_vec((labels.len(), dims), values).expect("row widths checked");
    let d = Dataset::new(features, labels, map.len(), "csv")?;
    Ok((d, map))
}

/// Minimum distance between any two blob centers.
pub const MIN_CENTER_DISTANCE: f64 = 4.0;

const CENTER_STREAM: u64 = 0xce;
const SAMPLE_STREAM: u64 = 0x5a;
const SPLIT_STREAM: u64 = 0x5b;

/// Isotropic Gaussian blobs, `per_class` samples per class, classes
/// interleaved (`label = i % n_classes`).
///
/// Centers are rejection-sampled in a cube that grows until every pair is
/// at least [`MIN_CENTER_DISTANCE`] apart.
pub fn synth_blobs(n_classes: usize, per_class: usize, dims: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || per_class == 0 || dims < 2 {
        return Err(Error::InvalidConfig(format!(
            "blobs need n_classes >= 2, per_class >= 1, dims >= 2 (got {n_classes}, {per_class}, {dims})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidConfig(format!("spread must be >= 0, got {spread}")));
    }
    let centers = blob_centers(n_classes, dims, seed);
    let noise = Normal::new(0.0, spread).expect("spread validated");
    let mut rng = seed::rng(seed, &[SAMPLE_STREAM]);
    let n = n_classes * per_class;
    let mut features = Array2::zeros((n, dims));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let c = i % n_classes;
        for (x, &mu) in row.iter_mut().zip(centers.row(c)) {
            *x = mu + noise.sample(&mut rng);
        }
        labels.push(c);
    }
    Dataset::new(features, labels, n_classes, format!("blobs{n_classes}x{dims}"))
}

pub(crate) fn blob_centers(n_classes: usize, dims: usize, seed: u64) -> Array2<f64> {
    let mut rng = seed::rng(seed, &[CENTER_STREAM]);
    let mut half_width = MIN_CENTER_DISTANCE * (n_classes as f64).powf(1.0 / dims as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut rejections = 0;
    while centers.len() < n_classes {
        let candidate: Vec<f64> = (0..dims).map(|_| rng.random_range(-half_width..half_width)).collect();
        let ok = centers.iter().all(|c| {
            c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= MIN_CENTER_DISTANCE
        });
        if ok {
            centers.push(candidate);
        } else {
            rejections += 1;
            if rejections % 1000 == 0 {
                half_width *= 1.1;
            }
        }
    }
    Array2::from_shape_vec((n_classes, dims), centers.into_iter().flatten().collect()).expect("square")
}

/// Shuffle with a seeded stream and cut: `ceil(n * fraction)` samples go to
/// the dev set, the rest stay in train.
pub fn dev_split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = d.len();
    // The epsilon absorbs representation error, e.g. 100 * 0.1.
    let n_dev = ((n as f64 * fraction) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[SPLIT_STREAM]));
    let (dev_idx, train_idx) = order.split_at(n_dev.min(n));
    Ok((d.subset(train_idx), d.subset(dev_idx)))
}

/// Per-feature affine map fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Below this a feature is only centered.
pub const MIN_STD: f64 = 1e-12;

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mean = train.features.mean_axis(Axis(0)).expect("non-empty");
        let std = train.features.std_axis(Axis(0), 0.0);
        Ok(Self { mean, std })
    }

    pub fn transform_row(&self, row: ArrayView1<f64>) -> Array1<f64> {
        let mut out = &row - &self.mean;
        for (v, &s) in out.iter_mut().zip(&self.std) {
            if s >= MIN_STD {
                *v /= s;
            }
        }
        out
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.dims() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} features, standardizer {}",
                d.dims(),
                self.mean.len()
            )));
        }
        let mut features = &d.features - &self.mean;
        for (mut col, &s) in features.columns_mut().into_iter().zip(&self.std) {
            if s >= MIN_STD {
                col /= s;
            }
        }
        Ok(Dataset { features, labels: d.labels.clone(), n_classes: d.n_classes, name: d.name.clone() })
    }
}

/// Standardize `train` and every dataset in `others` with train statistics.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, Standardizer)> {
    let s = Standardizer::fit(train)?;
    let train = s.apply(train)?;
    let others = others.iter().map(|d| s.apply(d)).collect::<Result<Vec<_>>>()?;
    Ok((train, others, s))
}
