//! Threshold-detector sampling from Gaussian states.
//!
//! Detection probabilities come from inclusion-exclusion over clicked modes:
//! P(pattern) = sum over Z subseteq C of (-1)^|Z| vac(marginal(N union Z)),
//! with C the clicked and N the unclicked modes. Sampling walks the modes in
//! order and draws each click from the exact conditional probability, so the
//! output is an exact i.i.d. sample of the threshold distribution, not an
//! approximation. A brute-force distribution oracle and an independent-click
//! coherent-state baseline sampler live here too.

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    marginal, vacuum_probability, Efficiency, GaussianState, Interferometer, SqueezingVector,
};

/// One detector outcome per mode, packed little-endian (bit i = mode i).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClickPattern {
    mask: u32,
    n_modes: u16,
}

impl ClickPattern {
    pub fn from_mask(mask: u32, n_modes: usize) -> Result<Self> {
        if n_modes == 0 || n_modes > 32 {
            return Err(Error::invalid("pattern length must be in 1..=32"));
        }
        if n_modes < 32 && mask >> n_modes != 0 {
            return Err(Error::invalid("pattern mask has bits beyond the mode count"));
        }
        Ok(ClickPattern { mask, n_modes: n_modes as u16 })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mask = bits
            .iter()
            .enumerate()
            .fold(0u32, |m, (i, &b)| if b { m | 1 << i } else { m });
        Self::from_mask(mask, bits.len())
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes as usize
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    /// True when mode i clicked.
    pub fn bit(&self, i: usize) -> bool {
        self.mask >> i & 1 == 1
    }

    pub fn count_clicks(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.n_modes()).map(|i| self.bit(i)).collect()
    }
}

/// Which physical model produced a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSource {
    Gbs,
    Coherent,
}

impl SampleSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleSource::Gbs => "gbs",
            SampleSource::Coherent => "coherent",
        }
    }
}

/// A reproducible batch of click patterns plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    patterns: Vec<ClickPattern>,
    n_modes: usize,
    seed: u64,
    source: SampleSource,
    efficiency: Efficiency,
}

impl SampleBatch {
    pub fn new(
        patterns: Vec<ClickPattern>,
        seed: u64,
        source: SampleSource,
        efficiency: Efficiency,
    ) -> Result<Self> {
        let n_modes = match patterns.first() {
            Some(p) => p.n_modes(),
            None => return Err(Error::invalid("sample batch must be non-empty")),
        };
        if patterns.iter().any(|p| p.n_modes() != n_modes) {
            return Err(Error::invalid("all patterns in a batch must have the same length"));
        }
        Ok(SampleBatch { patterns, n_modes, seed, source, efficiency })
    }

    pub fn patterns(&self) -> &[ClickPattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source(&self) -> SampleSource {
        self.source
    }

    pub fn efficiency(&self) -> Efficiency {
        self.efficiency
    }

    /// Re-tags the batch with the transmission that produced its state, for
    /// samplers that receive an already-lossy state and cannot know it.
    pub fn with_efficiency(mut self, eta: Efficiency) -> Self {
        self.efficiency = eta;
        self
    }

    /// A prefix view of the first `count` samples, as an independent batch.
    /// Valid as a smaller batch because samples use per-index RNG streams.
    pub fn prefix(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(Error::invalid(format!(
                "prefix length {count} outside 1..={}",
                self.len()
            )));
        }
        Ok(SampleBatch {
            patterns: self.patterns[..count].to_vec(),
            n_modes: self.n_modes,
            seed: self.seed,
            source: self.source,
            efficiency: self.efficiency,
        })
    }
}

/// Largest mode count the exact sampler supports (2^n cached subsets).
pub const MAX_SAMPLER_MODES: usize = 20;

/// Largest mode count the brute-force oracle enumerates.
pub const MAX_ORACLE_MODES: usize = 14;

/// Vacuum probabilities of every mode-subset marginal, indexed by subset
/// bitmask. Shared read-only by all samples; the empty subset has
/// probability 1 so inclusion-exclusion needs no special cases.
pub struct SubsetVacuumCache {
    probs: Vec<f64>,
    n_modes: usize,
}

impl SubsetVacuumCache {
    pub fn build(state: &GaussianState) -> Result<Self> {
        let n = state.n_modes();
        if n > MAX_SAMPLER_MODES {
            return Err(Error::capacity(format!(
                "exact sampling supports at most {MAX_SAMPLER_MODES} modes, got {n}"
            )));
        }
        let size = 1usize << n;
        let probs: Vec<f64> = (0..size)
            .into_par_iter()
            .map(|mask| {
                if mask == 0 {
                    return Ok(1.0);
                }
                let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
                vacuum_probability(&marginal(state, &subset)?)
            })
            .collect::<Result<_>>()?;
        Ok(SubsetVacuumCache { probs, n_modes: n })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// Vacuum probability of the marginal over the modes in `mask`.
    #[inline]
    pub fn prob(&self, mask: u32) -> f64 {
        self.probs[mask as usize]
    }

    /// Inclusion-exclusion over subsets of `cmask` on top of the fixed modes
    /// in `base`: sum over Z subseteq cmask of (-1)^|Z| prob(base | Z).
    #[inline]
    fn alternating_sum(&self, base: u32, cmask: u32) -> f64 {
        let mut acc = 0.0;
        let mut z = cmask;
        loop {
            let term = self.probs[(base | z) as usize];
            if z.count_ones() & 1 == 1 {
                acc -= term;
            } else {
                acc += term;
            }
            if z == 0 {
                break;
            }
            z = z.wrapping_sub(1) & cmask;
        }
        acc
    }
}

/// Exact probability of one click pattern, by inclusion-exclusion with fresh
/// determinant evaluations (no cache; the oracle path for spot checks).
pub fn pattern_probability(state: &GaussianState, pattern: &ClickPattern) -> Result<f64> {
    let n = state.n_modes();
    if pattern.n_modes() != n {
        return Err(Error::invalid(format!(
            "pattern has {} modes but state has {n}",
            pattern.n_modes()
        )));
    }
    let cmask = pattern.mask();
    let nmask = !cmask & mask_all(n);
    let mut acc = 0.0;
    let mut z = cmask;
    loop {
        let sub = nmask | z;
        let term = if sub == 0 {
            1.0
        } else {
            let subset: Vec<usize> = (0..n).filter(|i| sub >> i & 1 == 1).collect();
            vacuum_probability(&marginal(state, &subset)?)?
        };
        if z.count_ones() & 1 == 1 {
            acc -= term;
        } else {
            acc += term;
        }
        if z == 0 {
            break;
        }
        z = z.wrapping_sub(1) & cmask;
    }
    Ok(acc.clamp(0.0, 1.0))
}

fn mask_all(n: usize) -> u32 {
    if n >= 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

/// Index of a pattern in lexicographic bit order (mode 0 most significant),
/// so a product state's distribution is the outer product of its factors.
pub fn lexicographic_index(pattern: &ClickPattern) -> usize {
    let n = pattern.n_modes();
    (0..n).fold(0usize, |acc, i| acc << 1 | pattern.bit(i) as usize)
}

/// Inverse of [`lexicographic_index`] for a fixed mode count.
pub fn pattern_from_lexicographic(index: usize, n: usize) -> ClickPattern {
    let mut mask = 0u32;
    for i in 0..n {
        if index >> (n - 1 - i) & 1 == 1 {
            mask |= 1 << i;
        }
    }
    ClickPattern { mask, n_modes: n as u16 }
}

/// All 2^n pattern probabilities in lexicographic bit order. Test oracle;
/// the exponential cost is guarded by [`MAX_ORACLE_MODES`].
pub fn full_distribution(state: &GaussianState) -> Result<Vec<f64>> {
    let n = state.n_modes();
    if n > MAX_ORACLE_MODES {
        return Err(Error::capacity(format!(
            "full distribution enumeration supports at most {MAX_ORACLE_MODES} modes, got {n}"
        )));
    }
    let cache = SubsetVacuumCache::build(state)?;
    let all = mask_all(n);
    let dist: Vec<f64> = (0..1usize << n)
        .map(|lex| {
            let p = pattern_from_lexicographic(lex, n);
            let cmask = p.mask();
            let raw = cache.alternating_sum(!cmask & all, cmask);
            debug_assert!(raw >= -1e-9, "pattern probability {raw} below -1e-9");
            raw.clamp(0.0, 1.0)
        })
        .collect();
    Ok(dist)
}

/// Total variation distance between two distributions over the same support.
pub fn total_variation_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("distributions must have the same support size"));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0)
}

/// Tolerance for conditional probabilities escaping [0, 1]: anything within
/// is floating-point cancellation and gets clamped, anything beyond aborts.
const CONDITIONAL_SLACK: f64 = 1e-6;

fn sample_one(cache: &SubsetVacuumCache, seed: u64, index: u64) -> Result<ClickPattern> {
    let n = cache.n_modes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut cmask = 0u32;
    let mut nmask = 0u32;
    // Joint probability of the prefix decided so far; 1.0 for the empty one.
    let mut q_prev = 1.0f64;
    for i in 0..n {
        let bit = 1u32 << i;
        // Prefix with mode i unclicked: mode i joins the vacuum-projected set.
        let q0 = cache.alternating_sum(nmask | bit, cmask);
        let q1 = q_prev - q0;
        let cond = if q_prev <= 0.0 {
            0.0
        } else {
            let c = q1 / q_prev;
            if !(-CONDITIONAL_SLACK..=1.0 + CONDITIONAL_SLACK).contains(&c) {
                return Err(Error::numerical(format!(
                    "conditional click probability {c} escapes [0,1] beyond slack at mode {i}"
                )));
            }
            c.clamp(0.0, 1.0)
        };
        if rng.random::<f64>() < cond {
            cmask |= bit;
            q_prev = q1;
        } else {
            nmask |= bit;
            q_prev = q0;
        }
    }
    Ok(ClickPattern { mask: cmask, n_modes: n as u16 })
}

/// Draws `count` i.i.d. threshold-detection samples from a Gaussian state.
///
/// Each mode's click is drawn from its exact conditional probability given
/// the prefix, as a ratio of joint prefix probabilities; all joint values
/// reduce to cached subset vacuum probabilities. Sample i uses RNG stream i
/// of the seed, so the batch is identical however the work is scheduled.
///
/// The state is taken as already transformed (network and loss applied); the
/// returned batch carries efficiency 1 until the caller re-tags it.
pub fn sample_threshold_gbs(state: &GaussianState, count: usize, seed: u64) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let cache = SubsetVacuumCache::build(state)?;
    let patterns: Vec<ClickPattern> = (0..count as u64)
        .into_par_iter()
        .map(|i| sample_one(&cache, seed, i))
        .collect::<Result<_>>()?;
    SampleBatch::new(patterns, seed, SampleSource::Gbs, Efficiency::new(1.0)?)
}

/// Like [`sample_threshold_gbs`] but reuses a prebuilt cache, for callers
/// that draw several batches from the same state.
pub fn sample_threshold_gbs_cached(
    cache: &SubsetVacuumCache,
    count: usize,
    seed: u64,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let patterns: Vec<ClickPattern> = (0..count as u64)
        .into_par_iter()
        .map(|i| sample_one(cache, seed, i))
        .collect::<Result<_>>()?;
    SampleBatch::new(patterns, seed, SampleSource::Gbs, Efficiency::new(1.0)?)
}

/// Independent-click baseline: coherent inputs with the same per-mode photon
/// number as the squeezed inputs (|alpha_i|^2 = sinh^2 r_i, phase 0) through
/// the same network. Output modes stay coherent, so clicks are independent
/// with p_i = 1 - exp(-eta |beta_i|^2).
pub fn sample_coherent_clicks(
    r: &SqueezingVector,
    u: &Interferometer,
    eta: Efficiency,
    count: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let n = u.n_modes();
    if r.len() != n {
        return Err(Error::invalid(format!(
            "squeezing vector has {} modes but network has {n}",
            r.len()
        )));
    }
    if n > 32 {
        return Err(Error::capacity("click patterns support at most 32 modes"));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let click_probs = coherent_click_probabilities(r, u, eta);
    let patterns: Vec<ClickPattern> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let mut mask = 0u32;
            for (m, &p) in click_probs.iter().enumerate() {
                if rng.random::<f64>() < p {
                    mask |= 1 << m;
                }
            }
            ClickPattern { mask, n_modes: n as u16 }
        })
        .collect();
    SampleBatch::new(patterns, seed, SampleSource::Coherent, eta)
}

/// Closed-form per-mode click probabilities of the coherent baseline.
pub fn coherent_click_probabilities(
    r: &SqueezingVector,
    u: &Interferometer,
    eta: Efficiency,
) -> Vec<f64> {
    let n = u.n_modes();
    let alpha: Vec<f64> = r.values().iter().map(|&ri| ri.sinh()).collect();
    (0..n)
        .map(|i| {
            let beta: Complex<f64> = (0..n)
                .map(|j| u.matrix()[(i, j)] * Complex::new(alpha[j], 0.0))
                .sum();
            1.0 - (-eta.value() * beta.norm_sqr()).exp()
        })
        .collect()
}

/// Per-mode click frequency of a batch.
pub fn average_clicks_per_mode(batch: &SampleBatch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must be non-empty"));
    }
    let n = batch.n_modes();
    let mut counts = vec![0usize; n];
    for p in batch.patterns() {
        for (i, c) in counts.iter_mut().enumerate() {
            *c += p.bit(i) as usize;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / batch.len() as f64).collect())
}
