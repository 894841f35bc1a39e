//! Labeled datasets, IDX (MNIST) ingestion, a synthetic blob generator and
//! client partitioners.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};

/// Row-major feature matrix with values in `[0, 1]` and class labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    image_shape: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::usage(format!("need at least 2 classes, got {classes}")));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::structural(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::usage(format!("feature value {bad} outside [0, 1]")));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dim {
            return Err(Error::structural(format!(
                "image shape {rows}x{cols} does not match dimension {}",
                self.dim
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn max_feature(&self) -> f64 {
        self.features.iter().copied().fold(0.0, f64::max)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        LabeledDataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    /// Indices of samples per class.
    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses an IDX header, returning the dimension sizes and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, "file truncated inside header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|k| word(4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let payload = &bytes[4 + 4 * ndims..];
    let expected: usize = dims.iter().product();
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload has {} bytes, header declares {expected}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label file pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (idims, pixels) = parse_idx(images_path, &image_bytes, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = parse_idx(labels_path, &label_bytes, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            labels_path,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let (rows, cols) = (idims[1], idims[2]);
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = 10;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(format_err(labels_path, format!("label {bad} outside 0..9")));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(features, labels, rows * cols, classes)?.with_image_shape(rows, cols)
}

/// Feature level shared by all classes on non-class axes.
const SYNTHETIC_BASE: f64 = 0.2;
/// Per-feature noise standard deviation; `separation` is measured in these units.
const SYNTHETIC_NOISE: f64 = 0.1;

/// Gaussian blobs with one centroid per class.
///
/// Class `c` is lifted by `separation × 0.1` on feature `d − C + c`, so the
/// leading features carry no class signal. Labels are balanced to within one
/// sample and shuffled; features are clamped to `[0, 1]`.
pub fn gen_synthetic<R: Rng + ?Sized>(
    classes: usize,
    samples: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if classes < 2 || dim < classes || samples == 0 {
        return Err(Error::usage(format!(
            "synthetic data needs C >= 2, d >= C, n >= 1 (got C={classes}, d={dim}, n={samples})"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::usage(format!("separation must be >= 0, got {separation}")));
    }
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("valid normal");
    let first_axis = dim - classes;
    let mut features = Vec::with_capacity(samples * dim);
    for &label in &labels {
        for j in 0..dim {
            let mut mean = SYNTHETIC_BASE;
            if j == first_axis + label {
                mean += separation * SYNTHETIC_NOISE;
            }
            features.push((mean + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    LabeledDataset::new(features, labels, dim, classes)
}

/// Disjoint index sets into a parent dataset, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// True when every index in `0..n` appears exactly once.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.assignments.iter().flatten() {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }

    fn canonical(mut assignments: Vec<Vec<usize>>) -> Self {
        for a in &mut assignments {
            a.sort_unstable();
        }
        Self { assignments }
    }
}

fn check_clients(n: usize, clients: usize) -> Result<()> {
    if clients == 0 || n < clients {
        return Err(Error::usage(format!(
            "cannot split {n} samples across {clients} clients"
        )));
    }
    Ok(())
}

/// Per class, shuffle and deal round-robin; the dealer position carries over
/// between classes so client sizes differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(
    data: &LabeledDataset,
    clients: usize,
    rng: &mut R,
) -> Result<Partition> {
    check_clients(data.len(), clients)?;
    let mut assignments = vec![Vec::new(); clients];
    let mut next = 0;
    for mut indices in data.indices_by_class() {
        indices.shuffle(rng);
        for i in indices {
            assignments[next].push(i);
            next = (next + 1) % clients;
        }
    }
    Ok(Partition::canonical(assignments))
}

/// Per class, draw client shares from `Dirichlet(α·1_K)` and cut the shuffled
/// class indices at the cumulative shares. Empty clients then take one sample
/// from the currently largest client.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    data: &LabeledDataset,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    check_clients(data.len(), clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::usage(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::usage(e.to_string()))?;
    let mut assignments = vec![Vec::new(); clients];
    for mut indices in data.indices_by_class() {
        indices.shuffle(rng);
        let mut shares: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = shares.iter().sum();
        if total > 0.0 {
            shares.iter_mut().for_each(|s| *s /= total);
        } else {
            shares.fill(1.0 / clients as f64);
        }
        let n_c = indices.len();
        let mut cumulative = 0.0;
        let mut start = 0;
        for (k, share) in shares.iter().enumerate() {
            cumulative += share;
            let end = if k + 1 == clients {
                n_c
            } else {
                ((cumulative * n_c as f64).round() as usize).clamp(start, n_c)
            };
            assignments[k].extend_from_slice(&indices[start..end]);
            start = end;
        }
    }
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client is nonempty");
        assignments[empty].push(moved);
    }
    Ok(Partition::canonical(assignments))
}
