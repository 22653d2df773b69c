//! Image data ingestion and the feature pipeline ahead of mode selection:
//! IDX loading, PCA, standardization, the logistic sigmoid, and quantization
//! of unit-interval features into temporal-bin indices.
//!
//! Everything that learns statistics (PCA, Standardizer) is fitted on a
//! training split and immutable afterwards; applying never refits.

use std::fs::File;
use std::io::Read as _;
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Images as a row-major n x d matrix of [0,1] values plus integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pixels: DMatrix<f64>,
    labels: Vec<u8>,
    split: SplitTag,
}

impl ImageDataset {
    pub fn new(pixels: DMatrix<f64>, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if pixels.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} pixel rows but {} labels",
                pixels.nrows(),
                labels.len()
            )));
        }
        if pixels.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one image"));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(ImageDataset { pixels, labels, split })
    }

    pub fn n_images(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Number of classes, taken as max label + 1.
    pub fn n_classes(&self) -> usize {
        *self.labels.iter().max().unwrap() as usize + 1
    }

    /// Rows of `indices`, as a dataset with the same split tag.
    pub fn select(&self, indices: &[usize]) -> Result<ImageDataset> {
        if indices.is_empty() {
            return Err(Error::invalid("selection must be non-empty"));
        }
        let d = self.n_pixels();
        let mut pixels = DMatrix::zeros(indices.len(), d);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.n_images() {
                return Err(Error::invalid(format!("image index {i} out of range")));
            }
            pixels.row_mut(row).copy_from(&self.pixels.row(i));
            labels.push(self.labels[i]);
        }
        ImageDataset::new(pixels, labels, self.split)
    }

    /// A class-balanced subset of `size` images: per-class index pools are
    /// shuffled by the seed, then classes are drained round-robin so counts
    /// differ by at most one while any class still has images left.
    pub fn stratified_subset(&self, size: usize, seed: u64) -> Result<ImageDataset> {
        if size == 0 || size > self.n_images() {
            return Err(Error::invalid(format!(
                "subset size {size} outside 1..={}",
                self.n_images()
            )));
        }
        let n_classes = self.n_classes();
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
        let mut taken = Vec::with_capacity(size);
        let mut cursor = vec![0usize; n_classes];
        'outer: loop {
            let mut any = false;
            for c in 0..n_classes {
                if cursor[c] < pools[c].len() {
                    taken.push(pools[c][cursor[c]]);
                    cursor[c] += 1;
                    any = true;
                    if taken.len() == size {
                        break 'outer;
                    }
                }
            }
            if !any {
                break;
            }
        }
        self.select(&taken)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1F && raw[1] == 0x8B {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(format!("{}: gzip stream corrupt: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(format!(
            "truncated while reading {what} at byte offset {offset}: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Loads an IDX image/label file pair (optionally gzipped, auto-detected)
/// into a dataset with pixels rescaled by 1/255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: SplitTag,
) -> Result<ImageDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let img = read_maybe_gzipped(images_path)?;
    let magic = be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {magic:#010x} at byte offset 0, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "row count")? as usize;
    let cols = be_u32(&img, 12, "column count")? as usize;
    let d = rows * cols;
    let payload = n * d;
    if img.len() != 16 + payload {
        return Err(Error::format(format!(
            "{}: expected {payload} pixel bytes at byte offset 16, have {}",
            images_path.display(),
            img.len().saturating_sub(16)
        )));
    }

    let lab = read_maybe_gzipped(labels_path)?;
    let magic = be_u32(&lab, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {magic:#010x} at byte offset 0, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = be_u32(&lab, 4, "label count")? as usize;
    if n_labels != n {
        return Err(Error::format(format!(
            "{} has {n_labels} labels but {} has {n} images",
            labels_path.display(),
            images_path.display()
        )));
    }
    if lab.len() != 8 + n {
        return Err(Error::format(format!(
            "{}: expected {n} label bytes at byte offset 8, have {}",
            labels_path.display(),
            lab.len().saturating_sub(8)
        )));
    }

    let pixels = DMatrix::from_fn(n, d, |i, j| img[16 + i * d + j] as f64 / 255.0);
    ImageDataset::new(pixels, lab[8..].to_vec(), split)
}

/// Principal components of a training set: top-M directions of the centered
/// data by decreasing variance, with each row's sign fixed so its
/// largest-magnitude entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    components: DMatrix<f64>,
    variance_ratios: Vec<f64>,
}

impl PcaModel {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// M x d matrix with orthonormal rows.
    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Fraction of total variance explained by each component, nonincreasing.
    pub fn variance_ratios(&self) -> &[f64] {
        &self.variance_ratios
    }

    /// Rebuilds a model from persisted parts, validating shapes only; the
    /// values are trusted to come from [`fit_pca`].
    pub fn from_parts(
        mean: DVector<f64>,
        components: DMatrix<f64>,
        variance_ratios: Vec<f64>,
    ) -> Result<Self> {
        if components.nrows() == 0
            || components.ncols() != mean.len()
            || variance_ratios.len() != components.nrows()
        {
            return Err(Error::format("inconsistent principal component shapes"));
        }
        if mean.iter().any(|v| !v.is_finite())
            || components.iter().any(|v| !v.is_finite())
            || variance_ratios.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::format("principal component entries must be finite"));
        }
        Ok(PcaModel { mean, components, variance_ratios })
    }
}

/// Fits PCA on the training pixels. The right singular directions of the
/// centered matrix are obtained from the eigendecomposition of the centered
/// Gram matrix X^T X - n mu mu^T, which shares them exactly and stays cheap
/// when n >> d.
// Eigenvalues sorted descending with the roundoff-negative tail clamped.
fn ordered_spectrum(eigenvalues: &DVector<f64>) -> (Vec<usize>, Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let clamped: Vec<f64> = order.iter().map(|&i| eigenvalues[i].max(0.0)).collect();
    let total = clamped.iter().sum();
    (order, clamped, total)
}

// Writes v into the row with the largest-magnitude entry made positive.
fn write_component_row(components: &mut DMatrix<f64>, row: usize, v: &DVector<f64>) {
    let mut lead = 0usize;
    for j in 1..v.len() {
        if v[j].abs() > v[lead].abs() {
            lead = j;
        }
    }
    let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
    for j in 0..v.len() {
        components[(row, j)] = sign * v[j];
    }
}

pub fn fit_pca(train: &ImageDataset, m: usize) -> Result<PcaModel> {
    let x = train.pixels();
    let n = x.nrows();
    let d = x.ncols();
    if m == 0 || m > n.min(d) {
        return Err(Error::invalid(format!(
            "component count {m} outside 1..={}",
            n.min(d)
        )));
    }
    let mean = x.row_mean().transpose();

    // Eigenpairs come from whichever Gram matrix is smaller: Xc'Xc (d x d)
    // and XcXc' (n x n) share their nonzero spectrum. Short wide data would
    // hand the d x d solver a matrix that is mostly null space, where the
    // iteration can stall and poison eigenvectors with NaNs; the n x n
    // problem stays clear of that regime.
    let mut components = DMatrix::zeros(m, d);
    let (clamped, total) = if n < d {
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }
        let eig = (&xc * xc.transpose()).symmetric_eigen();
        let (order, clamped, total) = ordered_spectrum(&eig.eigenvalues);
        if total <= 0.0 {
            return Err(Error::invalid("training data has zero variance"));
        }
        for (row, &i) in order.iter().take(m).enumerate() {
            // Below this share of the spectrum the direction is eigensolver
            // noise, not data; refuse rather than emit a junk component.
            if clamped[row] <= total * 1e-12 {
                return Err(Error::numerical(format!(
                    "component {row} lies beyond the numerical rank of the training data"
                )));
            }
            let mut v = xc.transpose() * eig.eigenvectors.column(i);
            let norm = v.norm();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::numerical(format!(
                    "component {row} could not be recovered from the sample Gram matrix"
                )));
            }
            v /= norm;
            write_component_row(&mut components, row, &v);
        }
        (clamped, total)
    } else {
        let mut gram = x.transpose() * x;
        gram -= &mean * mean.transpose() * n as f64;
        let eig = gram.symmetric_eigen();
        let (order, clamped, total) = ordered_spectrum(&eig.eigenvalues);
        if total <= 0.0 {
            return Err(Error::invalid("training data has zero variance"));
        }
        for (row, &i) in order.iter().take(m).enumerate() {
            write_component_row(&mut components, row, &eig.eigenvectors.column(i).clone_owned());
        }
        (clamped, total)
    };
    if components.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "eigenvector computation produced non-finite principal components",
        ));
    }
    let variance_ratios = clamped[..m].iter().map(|&l| l / total).collect();
    Ok(PcaModel { mean, components, variance_ratios })
}

/// Projects rows of `images` (n x d) onto the principal components (n x M).
pub fn transform_pca(model: &PcaModel, images: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = model.mean.len();
    if images.ncols() != d {
        return Err(Error::invalid(format!(
            "images have {} columns but the model expects {d}",
            images.ncols()
        )));
    }
    let projected = images * model.components.transpose();
    let mean_proj = &model.components * &model.mean;
    let mut out = projected;
    for mut row in out.row_iter_mut() {
        row -= mean_proj.transpose();
    }
    Ok(out)
}

/// Smallest standard deviation the Standardizer stores; constant columns take
/// this floor and therefore map to exactly zero.
pub const STDDEV_FLOOR: f64 = 1e-8;

/// Per-column affine map to zero mean and unit variance, fitted on training
/// features with the population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &DMatrix<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("cannot fit a standardizer on zero rows"));
        }
        let n = features.nrows() as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut stddev = Vec::with_capacity(features.ncols());
        for j in 0..features.ncols() {
            let col = features.column(j);
            let mu = col.sum() / n;
            let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            stddev.push(var.sqrt().max(STDDEV_FLOOR));
        }
        Ok(Standardizer { mean, stddev })
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::invalid(format!(
                "features have {} columns but the standardizer expects {}",
                features.ncols(),
                self.mean.len()
            )));
        }
        Ok(DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) / self.stddev[j]
        }))
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    /// Rebuilds a standardizer from persisted columns.
    pub fn from_parts(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != stddev.len() {
            return Err(Error::format("standardizer columns must match and be non-empty"));
        }
        if mean.iter().any(|v| !v.is_finite())
            || stddev.iter().any(|v| !v.is_finite() || *v < STDDEV_FLOOR)
        {
            return Err(Error::format(
                "standardizer entries must be finite with stddev at or above the floor",
            ));
        }
        Ok(Standardizer { mean, stddev })
    }
}

/// Elementwise logistic function 1/(1 + e^{-x}), mapping into (0, 1).
pub fn sigmoid(features: &DMatrix<f64>) -> DMatrix<f64> {
    features.map(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Quantization rule for one unit-interval value: floor(x T), clamped into
/// [0, T-1]. Monotone in x for fixed T.
pub fn quantize_unit_interval(x: f64, t: usize) -> u16 {
    let idx = (x * t as f64).floor();
    idx.clamp(0.0, (t - 1) as f64) as u16
}

/// Integer feature indices, one per image per feature, each bounded by its
/// feature's bin count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFeatures {
    indices: Vec<u16>,
    n_images: usize,
    bin_counts: Vec<u16>,
}

impl QuantizedFeatures {
    pub fn new(indices: Vec<u16>, n_images: usize, bin_counts: Vec<u16>) -> Result<Self> {
        if n_images == 0 || bin_counts.is_empty() {
            return Err(Error::invalid("quantized features must be non-empty"));
        }
        if indices.len() != n_images * bin_counts.len() {
            return Err(Error::invalid("index buffer does not match image/feature counts"));
        }
        let f = bin_counts.len();
        for (pos, &idx) in indices.iter().enumerate() {
            let bins = bin_counts[pos % f];
            if idx >= bins {
                return Err(Error::invalid(format!(
                    "index {idx} out of range for {bins} bins at feature {}",
                    pos % f
                )));
            }
        }
        Ok(QuantizedFeatures { indices, n_images, bin_counts })
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_features(&self) -> usize {
        self.bin_counts.len()
    }

    pub fn bin_counts(&self) -> &[u16] {
        &self.bin_counts
    }

    /// Quantized value of feature `feat` for image `img`.
    pub fn index(&self, img: usize, feat: usize) -> u16 {
        self.indices[img * self.bin_counts.len() + feat]
    }
}

/// Quantizes every entry with a single bin count T.
pub fn quantize(features: &DMatrix<f64>, t: usize) -> Result<QuantizedFeatures> {
    quantize_with_bins(features, &vec![t; features.ncols()])
}

/// Quantizes with a per-column bin count (features headed for temporal
/// partitions of different sizes).
pub fn quantize_with_bins(features: &DMatrix<f64>, bins: &[usize]) -> Result<QuantizedFeatures> {
    if bins.len() != features.ncols() {
        return Err(Error::invalid(format!(
            "{} bin counts for {} feature columns",
            bins.len(),
            features.ncols()
        )));
    }
    if let Some(&t) = bins.iter().find(|&&t| t < 2) {
        return Err(Error::invalid(format!("bin count {t} must be at least 2")));
    }
    if features.nrows() == 0 {
        return Err(Error::invalid("cannot quantize zero rows"));
    }
    let f = features.ncols();
    let mut indices = Vec::with_capacity(features.nrows() * f);
    for i in 0..features.nrows() {
        for j in 0..f {
            indices.push(quantize_unit_interval(features[(i, j)], bins[j]));
        }
    }
    QuantizedFeatures::new(indices, features.nrows(), bins.iter().map(|&t| t as u16).collect())
}

/// Cumulative explained-variance ratio per group of `group_size` consecutive
/// components: entry g covers components 0 ..= (g+1) group_size - 1.
pub fn cumulative_variance_ratio(model: &PcaModel, group_size: usize) -> Result<Vec<f64>> {
    let m = model.n_components();
    if group_size == 0 || m % group_size != 0 {
        return Err(Error::invalid(format!(
            "component count {m} is not divisible by group size {group_size}"
        )));
    }
    let mut out = Vec::with_capacity(m / group_size);
    let mut acc = 0.0;
    for (i, &r) in model.variance_ratios.iter().enumerate() {
        acc += r;
        if (i + 1) % group_size == 0 {
            out.push(acc);
        }
    }
    Ok(out)
}
