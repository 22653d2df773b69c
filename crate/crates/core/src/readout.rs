//! Linear readout layers trained in closed form.
//!
//! Three classifier shapes share one trainer: a perceptron reads the raw
//! pixel part, a GELM reads the click-frequency part, and a GRVFL reads
//! both. Training regresses one-hot 0/1 targets with a shrunken
//! pseudo-inverse and prediction takes the argmax score.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Perceptron,
    Gelm,
    Grvfl,
}

impl ClassifierKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierKind::Perceptron => "perceptron",
            ClassifierKind::Gelm => "gelm",
            ClassifierKind::Grvfl => "grvfl",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perceptron" => Ok(ClassifierKind::Perceptron),
            "gelm" => Ok(ClassifierKind::Gelm),
            "grvfl" => Ok(ClassifierKind::Grvfl),
            other => Err(Error::config(format!(
                "unknown classifier kind {other:?}, expected perceptron, gelm or grvfl"
            ))),
        }
    }
}

/// Assembled classifier inputs with a trailing constant-1 bias column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    matrix: DMatrix<f64>,
    kind: ClassifierKind,
}

impl DesignMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn width(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Builds the design matrix for a classifier kind: perceptron reads the raw
/// part, gelm the frequency part, grvfl both; a bias column is appended.
pub fn assemble(
    kind: ClassifierKind,
    raw: &DMatrix<f64>,
    freq: &DMatrix<f64>,
) -> Result<DesignMatrix> {
    let (n, parts): (usize, Vec<&DMatrix<f64>>) = match kind {
        ClassifierKind::Perceptron => (raw.nrows(), vec![raw]),
        ClassifierKind::Gelm => (freq.nrows(), vec![freq]),
        ClassifierKind::Grvfl => {
            if raw.nrows() != freq.nrows() {
                return Err(Error::invalid(format!(
                    "raw part has {} rows but frequency part has {}",
                    raw.nrows(),
                    freq.nrows()
                )));
            }
            (raw.nrows(), vec![raw, freq])
        }
    };
    if n == 0 {
        return Err(Error::invalid("design matrix must have at least one row"));
    }
    let width: usize = parts.iter().map(|p| p.ncols()).sum::<usize>() + 1;
    let mut matrix = DMatrix::zeros(n, width);
    let mut col = 0;
    for part in parts {
        if part.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design matrix entries must be finite"));
        }
        matrix.view_mut((0, col), (n, part.ncols())).copy_from(part);
        col += part.ncols();
    }
    for i in 0..n {
        matrix[(i, width - 1)] = 1.0;
    }
    Ok(DesignMatrix { matrix, kind })
}

/// Relative cutoff below which singular values are treated as zero when
/// lambda = 0 (pure Moore-Penrose).
pub const PINV_CUTOFF: f64 = 1e-10;

/// Least-squares solve W = pinv_lambda(X) Y through the SVD: singular values
/// s are shrunk to s/(s^2 + lambda s_max^2); lambda = 0 instead inverts
/// values above PINV_CUTOFF * s_max and drops the rest. `lambda` is relative
/// to s_max^2 so one config value works across feature scales.
pub fn pinv_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::invalid(format!(
            "{} design rows but {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge parameter must be finite and >= 0, got {lambda}")));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let s = &svd.singular_values;
    let s_max = s.iter().copied().fold(0.0f64, f64::max);

    let mut uty = u.transpose() * y;
    for (i, &si) in s.iter().enumerate() {
        let f = if lambda > 0.0 {
            si / (si * si + lambda * s_max * s_max)
        } else if s_max > 0.0 && si > PINV_CUTOFF * s_max {
            1.0 / si
        } else {
            0.0
        };
        for j in 0..uty.ncols() {
            uty[(i, j)] *= f;
        }
    }
    Ok(v_t.transpose() * uty)
}

fn one_hot(labels: &[u8], n_classes: usize) -> Result<DMatrix<f64>> {
    if n_classes == 0 {
        return Err(Error::invalid("class count must be positive"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::invalid(format!("label {l} outside 0..{n_classes}")));
    }
    let mut y = DMatrix::zeros(labels.len(), n_classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l as usize)] = 1.0;
    }
    Ok(y)
}

/// Trained readout: weight matrix plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutWeights {
    weights: DMatrix<f64>,
    lambda: f64,
    kind: ClassifierKind,
    n_classes: usize,
}

impl ReadoutWeights {
    pub fn new(
        weights: DMatrix<f64>,
        lambda: f64,
        kind: ClassifierKind,
        n_classes: usize,
    ) -> Result<Self> {
        if weights.ncols() != n_classes {
            return Err(Error::invalid("weight columns must match the class count"));
        }
        Ok(ReadoutWeights { weights, lambda, kind, n_classes })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }
}

/// Trains the readout on one-hot 0/1 targets via [`pinv_solve`].
pub fn train_pinv(
    x: &DesignMatrix,
    labels: &[u8],
    n_classes: usize,
    lambda: f64,
) -> Result<ReadoutWeights> {
    if labels.len() != x.n_rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} design rows",
            labels.len(),
            x.n_rows()
        )));
    }
    let y = one_hot(labels, n_classes)?;
    let w = pinv_solve(x.matrix(), &y, lambda)?;
    ReadoutWeights::new(w, lambda, x.kind(), n_classes)
}

/// Argmax class per row of X W; ties go to the smaller class id.
pub fn predict(w: &ReadoutWeights, x: &DesignMatrix) -> Result<Vec<u8>> {
    if x.width() != w.weights.nrows() {
        return Err(Error::invalid(format!(
            "design width {} does not match weight rows {}",
            x.width(),
            w.weights.nrows()
        )));
    }
    let scores = x.matrix() * &w.weights;
    Ok((0..scores.nrows())
        .map(|i| {
            let mut best = 0usize;
            for c in 1..w.n_classes {
                if scores[(i, c)] > scores[(i, best)] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Training sum-of-squares residual ||X W - Y||_F^2 against one-hot targets.
pub fn training_residual(
    w: &ReadoutWeights,
    x: &DesignMatrix,
    labels: &[u8],
) -> Result<f64> {
    if x.width() != w.weights.nrows() {
        return Err(Error::invalid("design width does not match weight rows"));
    }
    if labels.len() != x.n_rows() {
        return Err(Error::invalid("label count does not match design rows"));
    }
    let y = one_hot(labels, w.n_classes)?;
    let r = x.matrix() * &w.weights - y;
    Ok(r.iter().map(|v| v * v).sum())
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("prediction and label counts must match and be non-empty"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn assemble_widths_and_bias() {
        let raw = random_matrix(5, 3, 1);
        let freq = random_matrix(5, 4, 2);
        let p = assemble(ClassifierKind::Perceptron, &raw, &freq).unwrap();
        assert_eq!(p.width(), 4);
        let g = assemble(ClassifierKind::Gelm, &raw, &freq).unwrap();
        assert_eq!(g.width(), 5);
        let r = assemble(ClassifierKind::Grvfl, &raw, &freq).unwrap();
        assert_eq!(r.width(), 8);
        for i in 0..5 {
            assert_eq!(r.matrix()[(i, 7)], 1.0);
        }
        // The grvfl column set contains both others' feature columns.
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(r.matrix()[(i, j)], p.matrix()[(i, j)]);
            }
            for j in 0..4 {
                assert_eq!(r.matrix()[(i, 3 + j)], g.matrix()[(i, j)]);
            }
        }
    }

    #[test]
    fn assemble_rejects_row_mismatch_and_non_finite() {
        let raw = random_matrix(5, 3, 1);
        let freq = random_matrix(4, 4, 2);
        assert!(assemble(ClassifierKind::Grvfl, &raw, &freq).is_err());
        let mut bad = random_matrix(5, 3, 3);
        bad[(0, 0)] = f64::NAN;
        assert!(assemble(ClassifierKind::Perceptron, &bad, &freq).is_err());
    }

    #[test]
    fn pinv_identity_recovers_targets_exactly() {
        let x = DMatrix::identity(6, 6);
        let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        let w = pinv_solve(&x, &y, 0.0).unwrap();
        for i in 0..6 {
            for j in 0..3 {
                assert_relative_eq!(w[(i, j)], y[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn linearly_separable_toy_set_trains_to_perfect_accuracy() {
        // Points +-e_i with class = i, plus sign flips: class i lives on
        // axis i, trivially separable by a linear map.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..3usize {
            for sign in [1.0f64, 0.5] {
                let mut r = vec![0.0; 3];
                r[i] = sign;
                rows.push(r);
                labels.push(i as u8);
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let raw = DMatrix::from_row_slice(6, 3, &flat);
        let x = assemble(ClassifierKind::Perceptron, &raw, &raw).unwrap();
        let w = train_pinv(&x, &labels, 3, 0.0).unwrap();
        let pred = predict(&w, &x).unwrap();
        assert_eq!(accuracy(&pred, &labels).unwrap(), 1.0);
    }

    #[test]
    fn duplicated_column_leaves_fitted_values_unchanged_at_lambda_zero() {
        let raw = random_matrix(12, 4, 5);
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let y = one_hot(&labels, 3).unwrap();
        let w = pinv_solve(&raw, &y, 0.0).unwrap();
        let fitted = &raw * &w;

        let mut dup = DMatrix::zeros(12, 5);
        dup.view_mut((0, 0), (12, 4)).copy_from(&raw);
        for i in 0..12 {
            dup[(i, 4)] = raw[(i, 1)];
        }
        let w2 = pinv_solve(&dup, &y, 0.0).unwrap();
        let fitted2 = &dup * &w2;
        for i in 0..12 {
            for j in 0..3 {
                assert!(
                    (fitted[(i, j)] - fitted2[(i, j)]).abs() <= 1e-8,
                    "({i},{j}): {} vs {}",
                    fitted[(i, j)],
                    fitted2[(i, j)]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_bit_for_bit() {
        let raw = random_matrix(20, 6, 9);
        let freq = random_matrix(20, 5, 10);
        let labels: Vec<u8> = (0..20).map(|i| (i % 4) as u8).collect();
        let x = assemble(ClassifierKind::Grvfl, &raw, &freq).unwrap();
        let a = train_pinv(&x, &labels, 4, 1e-6).unwrap();
        let b = train_pinv(&x, &labels, 4, 1e-6).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn nested_designs_never_increase_training_residual() {
        let raw = random_matrix(30, 5, 11);
        let freq = random_matrix(30, 7, 12);
        let labels: Vec<u8> = (0..30).map(|i| (i % 3) as u8).collect();
        let residual = |kind| {
            let x = assemble(kind, &raw, &freq).unwrap();
            let w = train_pinv(&x, &labels, 3, 0.0).unwrap();
            training_residual(&w, &x, &labels).unwrap()
        };
        let r_perc = residual(ClassifierKind::Perceptron);
        let r_gelm = residual(ClassifierKind::Gelm);
        let r_grvfl = residual(ClassifierKind::Grvfl);
        assert!(r_grvfl <= r_perc + 1e-8, "{r_grvfl} vs perceptron {r_perc}");
        assert!(r_grvfl <= r_gelm + 1e-8, "{r_grvfl} vs gelm {r_gelm}");
    }

    #[test]
    fn wider_frequency_prefix_never_increases_gelm_residual() {
        let raw = random_matrix(25, 3, 13);
        let freq = random_matrix(25, 8, 14);
        let labels: Vec<u8> = (0..25).map(|i| (i % 5) as u8).collect();
        let mut prev = f64::INFINITY;
        for nb in [2usize, 4, 6, 8] {
            let prefix = freq.columns(0, nb).into_owned();
            let x = assemble(ClassifierKind::Gelm, &raw, &prefix).unwrap();
            let w = train_pinv(&x, &labels, 5, 0.0).unwrap();
            let r = training_residual(&w, &x, &labels).unwrap();
            assert!(r <= prev + 1e-8, "residual rose from {prev} to {r} at width {nb}");
            prev = r;
        }
    }

    #[test]
    fn predict_tie_breaking_and_scale_invariance() {
        let w = ReadoutWeights::new(DMatrix::zeros(3, 4), 0.0, ClassifierKind::Perceptron, 4)
            .unwrap();
        let raw = random_matrix(5, 2, 15);
        let x = assemble(ClassifierKind::Perceptron, &raw, &raw).unwrap();
        assert_eq!(predict(&w, &x).unwrap(), vec![0; 5]);

        let labels: Vec<u8> = (0..5).map(|i| (i % 2) as u8).collect();
        let trained = train_pinv(&x, &labels, 2, 0.0).unwrap();
        let scaled = ReadoutWeights::new(
            trained.weights() * 3.0,
            0.0,
            ClassifierKind::Perceptron,
            2,
        )
        .unwrap();
        assert_eq!(predict(&trained, &x).unwrap(), predict(&scaled, &x).unwrap());
    }

    #[test]
    fn train_rejects_bad_labels_and_lambda() {
        let raw = random_matrix(4, 2, 16);
        let x = assemble(ClassifierKind::Perceptron, &raw, &raw).unwrap();
        assert!(train_pinv(&x, &[0, 1, 2, 5], 3, 0.0).is_err());
        assert!(train_pinv(&x, &[0, 1], 2, 0.0).is_err());
        assert!(train_pinv(&x, &[0, 1, 0, 1], 2, -1.0).is_err());
    }

    #[test]
    fn kind_round_trips_through_strings() {
        for kind in [ClassifierKind::Perceptron, ClassifierKind::Gelm, ClassifierKind::Grvfl] {
            let s = kind.as_str();
            assert_eq!(s.parse::<ClassifierKind>().unwrap(), kind);
        }
        assert!("svm".parse::<ClassifierKind>().is_err());
    }
}
