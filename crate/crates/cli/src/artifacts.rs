//! On-disk artifacts: atomic writes, digests, and JSON codecs for the
//! frozen pipeline pieces.
//!
//! Every writer goes through a sibling temp file plus rename so a crashed
//! run never leaves a half-written artifact behind. Floats are stored as
//! JSON numbers; serde_json's shortest-roundtrip formatting restores them
//! bit-exactly, which the regeneration checks rely on.

use std::path::Path;

use gbselm_core::data::{PcaModel, Standardizer};
use gbselm_core::encoding::{BasisSet, ModeLayout};
use gbselm_core::evaluation::FittedPipeline;
use gbselm_core::readout::{ClassifierKind, ReadoutWeights};
use gbselm_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{}: not a file path", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = dir.join(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn hash_to_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Column-major matrix payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct MatrixJson {
    pub nrows: usize,
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixJson { nrows: m.nrows(), ncols: m.ncols(), data: m.as_slice().to_vec() }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.nrows * self.ncols {
            return Err(Error::format("matrix payload length mismatch"));
        }
        Ok(DMatrix::from_column_slice(self.nrows, self.ncols, &self.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StandardizerJson {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl StandardizerJson {
    fn from_core(s: &Standardizer) -> Self {
        StandardizerJson { mean: s.mean().to_vec(), stddev: s.stddev().to_vec() }
    }

    fn to_core(&self) -> Result<Standardizer> {
        Standardizer::from_parts(self.mean.clone(), self.stddev.clone())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BasesFile {
    pub version: u32,
    pub config_hash: String,
    pub n_spatial: usize,
    pub patterns: Vec<u16>,
}

impl BasesFile {
    pub fn new(bases: &BasisSet, config_hash: &str) -> Self {
        BasesFile {
            version: 1,
            config_hash: config_hash.to_string(),
            n_spatial: bases.n_spatial(),
            patterns: bases.patterns().to_vec(),
        }
    }

    pub fn to_basis_set(&self) -> Result<BasisSet> {
        BasisSet::new(self.patterns.clone(), self.n_spatial)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineJson {
    pub n_spatial: usize,
    pub n_temporal: usize,
    pub boundary: usize,
    pub n_groups: usize,
    pub pca_mean: Vec<f64>,
    pub pca_components: MatrixJson,
    pub pca_variance_ratios: Vec<f64>,
    pub feature_standardizer: StandardizerJson,
    pub basis_patterns: Vec<u16>,
    pub basis_count: Option<usize>,
    pub feature_groups: Option<usize>,
    pub group_weights: Option<Vec<f64>>,
    pub frequency_standardizer: StandardizerJson,
}

impl PipelineJson {
    pub fn from_core(p: &FittedPipeline) -> Self {
        PipelineJson {
            n_spatial: p.layout().n_spatial(),
            n_temporal: p.layout().n_temporal(),
            boundary: p.layout().boundary(),
            n_groups: p.n_groups(),
            pca_mean: p.pca().mean().as_slice().to_vec(),
            pca_components: MatrixJson::from_matrix(p.pca().components()),
            pca_variance_ratios: p.pca().variance_ratios().to_vec(),
            feature_standardizer: StandardizerJson::from_core(p.feature_standardizer()),
            basis_patterns: p.bases().patterns().to_vec(),
            basis_count: p.basis_count(),
            feature_groups: p.feature_groups(),
            group_weights: p.group_weights().map(|w| w.to_vec()),
            frequency_standardizer: StandardizerJson::from_core(p.frequency_standardizer()),
        }
    }

    pub fn to_core(&self) -> Result<FittedPipeline> {
        let layout = ModeLayout::new(self.n_spatial, self.n_temporal, self.boundary)?;
        let pca = PcaModel::from_parts(
            DVector::from_vec(self.pca_mean.clone()),
            self.pca_components.to_matrix()?,
            self.pca_variance_ratios.clone(),
        )?;
        FittedPipeline::from_parts(
            layout,
            self.n_groups,
            pca,
            self.feature_standardizer.to_core()?,
            BasisSet::new(self.basis_patterns.clone(), self.n_spatial)?,
            self.basis_count,
            self.feature_groups,
            self.group_weights.clone(),
            self.frequency_standardizer.to_core()?,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub config_hash: String,
    /// Canonical config text, kept verbatim so a hash mismatch can be
    /// explained with a key-level diff.
    pub config: String,
    pub kind: String,
    pub n_classes: usize,
    pub lambda: f64,
    pub weights: MatrixJson,
    /// Absent for the raw-pixel readout, which needs no frozen pipeline.
    pub pipeline: Option<PipelineJson>,
}

impl ModelFile {
    pub fn new(
        kind: ClassifierKind,
        weights: &ReadoutWeights,
        pipeline: Option<&FittedPipeline>,
        config_hash: &str,
        config_text: &str,
    ) -> Self {
        ModelFile {
            version: 1,
            config_hash: config_hash.to_string(),
            config: config_text.to_string(),
            kind: kind.as_str().to_string(),
            n_classes: weights.n_classes(),
            lambda: weights.lambda(),
            weights: MatrixJson::from_matrix(weights.weights()),
            pipeline: pipeline.map(PipelineJson::from_core),
        }
    }

    pub fn to_parts(&self) -> Result<(ClassifierKind, ReadoutWeights, Option<FittedPipeline>)> {
        let kind: ClassifierKind = self.kind.parse()?;
        let weights =
            ReadoutWeights::new(self.weights.to_matrix()?, self.lambda, kind, self.n_classes)?;
        let pipeline = match (&self.pipeline, kind) {
            (None, ClassifierKind::Perceptron) => None,
            (Some(p), ClassifierKind::Gelm | ClassifierKind::Grvfl) => Some(p.to_core()?),
            _ => {
                return Err(Error::format(
                    "model file pipeline presence does not match its classifier kind",
                ))
            }
        };
        Ok((kind, weights, pipeline))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("artifact.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn hex_renders_lowercase_pairs() {
        let mut hash = [0u8; 32];
        hash[0] = 0xab;
        hash[31] = 0x01;
        let hex = hash_to_hex(&hash);
        assert_eq!(hex.len(), 64);
        assert!(hex.starts_with("ab"));
        assert!(hex.ends_with("01"));
    }

    #[test]
    fn matrix_json_preserves_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = MatrixJson::from_matrix(&m).to_matrix().unwrap();
        assert_eq!(back, m);
        let bad = MatrixJson { nrows: 2, ncols: 3, data: vec![0.0; 5] };
        assert!(bad.to_matrix().is_err());
    }
}
