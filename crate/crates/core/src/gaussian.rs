//! Zero-mean Gaussian states of n bosonic modes and the transformations the
//! pipeline needs: squeezing, passive interferometers, uniform loss, marginals
//! and vacuum probabilities.
//!
//! Conventions, fixed once for the whole crate: hbar = 2, vacuum covariance
//! is the identity, quadratures ordered xxpp (x-block rows 0..n, p-block rows
//! n..2n), and r > 0 squeezes the x quadrature. With these choices the vacuum
//! probability of a state is 2^n / sqrt(det(sigma + I)) with no half factors.

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Per-mode squeezing parameters r (dimensionless).
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezingVector(Vec<f64>);

impl SqueezingVector {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("squeezing parameters must be finite"));
        }
        Ok(SqueezingVector(r))
    }

    /// n copies of the same squeezing parameter.
    pub fn uniform(r: f64, n: usize) -> Result<Self> {
        Self::new(vec![r; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// An n-mode linear optical network, stored as its n x n unitary.
#[derive(Debug, Clone)]
pub struct Interferometer {
    u: DMatrix<Complex<f64>>,
}

/// Tolerance on max|U^dag U - I| for accepting a matrix as unitary.
pub const UNITARITY_TOL: f64 = 1e-10;

impl Interferometer {
    /// Wraps a matrix after checking unitarity to [`UNITARITY_TOL`].
    pub fn new(u: DMatrix<Complex<f64>>) -> Result<Self> {
        if u.nrows() != u.ncols() || u.nrows() == 0 {
            return Err(Error::invalid("interferometer matrix must be square and non-empty"));
        }
        let n = u.nrows();
        let gram = u.adjoint() * &u;
        let dev = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| {
                let expect = if i == j { Complex::new(1.0, 0.0) } else { Complex::new(0.0, 0.0) };
                (gram[(i, j)] - expect).norm()
            })
            .fold(0.0f64, f64::max);
        if dev > UNITARITY_TOL {
            return Err(Error::invalid(format!(
                "matrix is not unitary: max|U^dag U - I| = {dev:.3e}"
            )));
        }
        Ok(Interferometer { u })
    }

    pub fn n_modes(&self) -> usize {
        self.u.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex<f64>> {
        &self.u
    }
}

/// End-to-end transmission in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency(f64);

impl Efficiency {
    pub fn new(eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("efficiency must lie in [0, 1], got {eta}")));
        }
        Ok(Efficiency(eta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Zero-mean Gaussian state: 2n x 2n real symmetric covariance in xxpp order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    sigma: DMatrix<f64>,
    n_modes: usize,
}

const SYMMETRY_TOL: f64 = 1e-10;

impl GaussianState {
    /// Builds a state from a covariance matrix, checking shape and symmetry.
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        if dim != sigma.ncols() || dim == 0 || dim % 2 != 0 {
            return Err(Error::invalid("covariance must be a non-empty 2n x 2n matrix"));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("covariance entries must be finite"));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::invalid(format!(
                        "covariance is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(GaussianState { n_modes: dim / 2, sigma })
    }

    pub fn vacuum(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::invalid("mode count must be positive"));
        }
        Ok(GaussianState { sigma: DMatrix::identity(2 * n_modes, 2 * n_modes), n_modes })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Mean photon number, (tr sigma - 2n)/4. Invariant under passive networks.
    pub fn mean_photon_number(&self) -> f64 {
        (self.sigma.trace() - 2.0 * self.n_modes as f64) / 4.0
    }

    /// Smallest symplectic eigenvalue of sigma. The uncertainty bound for a
    /// physical state is >= 1 (vacuum = identity convention); squeezing moves
    /// ordinary eigenvalues below 1 but never the symplectic ones.
    ///
    /// Computed as the moduli of the eigenvalues of Omega sigma, which occur
    /// in pairs +-(i nu).
    pub fn min_symplectic_eigenvalue(&self) -> f64 {
        let n = self.n_modes;
        let dim = 2 * n;
        // Omega sigma with Omega = [[0, I], [-I, 0]] in xxpp order: the top
        // half is the p-rows of sigma, the bottom half is minus the x-rows.
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..dim {
                m[(i, j)] = self.sigma[(n + i, j)];
                m[(n + i, j)] = -self.sigma[(i, j)];
            }
        }
        m.complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(f64::INFINITY, f64::min)
    }

    fn range_check(&self, modes: &[usize]) -> Result<()> {
        for (pos, &m) in modes.iter().enumerate() {
            if m >= self.n_modes {
                return Err(Error::invalid(format!(
                    "mode index {m} out of range for {}-mode state",
                    self.n_modes
                )));
            }
            if modes[..pos].contains(&m) {
                return Err(Error::invalid(format!("duplicate mode index {m} in subset")));
            }
        }
        Ok(())
    }
}

/// Haar-random unitary via QR of a complex Gaussian matrix, with the R
/// diagonal's phases folded into Q so the distribution is exactly Haar.
pub fn haar_random_unitary(n: usize, seed: u64) -> Result<Interferometer> {
    if n == 0 {
        return Err(Error::invalid("mode count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let z = DMatrix::from_fn(n, n, |_, _| {
        let re: f64 = normal.sample(&mut rng);
        let im: f64 = normal.sample(&mut rng);
        Complex::new(re * inv_sqrt2, im * inv_sqrt2)
    });
    let qr = z.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Scale column j of Q by the phase of R_jj.
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() == 0.0 { Complex::new(1.0, 0.0) } else { d / d.norm() };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    Interferometer::new(q)
}

/// Product of single-mode squeezed vacua: diag(e^{-2r}) on x, diag(e^{+2r}) on p.
pub fn squeezed_vacuum_state(r: &SqueezingVector) -> Result<GaussianState> {
    let n = r.len();
    if n == 0 {
        return Err(Error::invalid("squeezing vector must be non-empty"));
    }
    let mut sigma = DMatrix::zeros(2 * n, 2 * n);
    for (i, &ri) in r.values().iter().enumerate() {
        sigma[(i, i)] = (-2.0 * ri).exp();
        sigma[(n + i, n + i)] = (2.0 * ri).exp();
    }
    Ok(GaussianState { sigma, n_modes: n })
}

/// Conjugates the covariance by the orthogonal-symplectic image of U:
/// O = [[Re U, -Im U], [Im U, Re U]], sigma' = O sigma O^T.
pub fn apply_interferometer(state: &GaussianState, u: &Interferometer) -> Result<GaussianState> {
    let n = state.n_modes;
    if u.n_modes() != n {
        return Err(Error::invalid(format!(
            "interferometer acts on {} modes but state has {}",
            u.n_modes(),
            n
        )));
    }
    let mut o = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let uij = u.matrix()[(i, j)];
            o[(i, j)] = uij.re;
            o[(i, n + j)] = -uij.im;
            o[(n + i, j)] = uij.im;
            o[(n + i, n + j)] = uij.re;
        }
    }
    let sigma = &o * &state.sigma * o.transpose();
    Ok(GaussianState { sigma, n_modes: n })
}

/// Uniform loss channel: sigma' = eta sigma + (1 - eta) I.
pub fn apply_uniform_loss(state: &GaussianState, eta: Efficiency) -> Result<GaussianState> {
    let dim = 2 * state.n_modes;
    let e = eta.value();
    let mut sigma = &state.sigma * e;
    for i in 0..dim {
        sigma[(i, i)] += 1.0 - e;
    }
    Ok(GaussianState { sigma, n_modes: state.n_modes })
}

/// Restriction of the state to an ordered subset of modes (x and p blocks).
pub fn marginal(state: &GaussianState, subset: &[usize]) -> Result<GaussianState> {
    state.range_check(subset)?;
    if subset.is_empty() {
        return Err(Error::invalid("marginal subset must be non-empty"));
    }
    let n = state.n_modes;
    let k = subset.len();
    let mut sigma = DMatrix::zeros(2 * k, 2 * k);
    for (a, &ma) in subset.iter().enumerate() {
        for (b, &mb) in subset.iter().enumerate() {
            sigma[(a, b)] = state.sigma[(ma, mb)];
            sigma[(a, k + b)] = state.sigma[(ma, n + mb)];
            sigma[(k + a, b)] = state.sigma[(n + ma, mb)];
            sigma[(k + a, k + b)] = state.sigma[(n + ma, n + mb)];
        }
    }
    Ok(GaussianState { sigma, n_modes: k })
}

/// Probability that all modes see vacuum: 2^n / sqrt(det(sigma + I)).
///
/// The determinant comes from a Cholesky factorization of sigma + I; a
/// non-positive pivot means the input was unphysical and is reported as a
/// numerical-domain error rather than clamped.
pub fn vacuum_probability(state: &GaussianState) -> Result<f64> {
    let dim = 2 * state.n_modes;
    let mut m = state.sigma.clone();
    for i in 0..dim {
        m[(i, i)] += 1.0;
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::numerical("sigma + I is not positive definite"))?;
    // det(sigma + I) = prod diag(L)^2, so sqrt(det) = prod diag(L).
    let l = chol.l();
    let mut sqrt_det = 1.0;
    for i in 0..dim {
        sqrt_det *= l[(i, i)];
    }
    Ok(2f64.powi(state.n_modes as i32) / sqrt_det)
}
