//! Feature-to-mode encoding and click-statistics extraction.
//!
//! Quantized image features pick detector modes on a spatial x temporal
//! layout: feature i drives spatial mode i mod S in group g = i/S, and its
//! quantized value picks the temporal mode inside the group's partition
//! (odd-numbered groups counting from 1 read the early temporal half A,
//! even-numbered the late half B). Click patterns restricted to a group's
//! selected modes are S-bit "computational bases"; images are described by
//! the frequencies of a fixed set of such bases.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::QuantizedFeatures;
use crate::error::{Error, Result};
use crate::sampler::{ClickPattern, SampleBatch, MAX_SAMPLER_MODES};

/// Spatial x temporal mode grid with a temporal boundary b splitting
/// partition A = [0, b) from partition B = [b, T).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeLayout {
    n_spatial: usize,
    n_temporal: usize,
    boundary: usize,
}

impl ModeLayout {
    pub fn new(n_spatial: usize, n_temporal: usize, boundary: usize) -> Result<Self> {
        if n_spatial == 0 || n_temporal == 0 {
            return Err(Error::invalid("layout dimensions must be positive"));
        }
        if !(1..=n_temporal).contains(&boundary) {
            return Err(Error::invalid(format!(
                "partition boundary {boundary} outside 1..={n_temporal}"
            )));
        }
        let n = n_spatial * n_temporal;
        if n > MAX_SAMPLER_MODES {
            return Err(Error::capacity(format!(
                "layout has {n} modes but exact sampling supports at most {MAX_SAMPLER_MODES}"
            )));
        }
        Ok(ModeLayout { n_spatial, n_temporal, boundary })
    }

    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    pub fn n_temporal(&self) -> usize {
        self.n_temporal
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn n_modes(&self) -> usize {
        self.n_spatial * self.n_temporal
    }

    /// Flat detector index of (spatial s, temporal t): modes are grouped by
    /// arrival time, spatial-major within each time step.
    pub fn mode_index(&self, spatial: usize, temporal: usize) -> usize {
        temporal * self.n_spatial + spatial
    }

    /// (temporal offset, temporal bin count) of the partition read by group
    /// g (0-based): even g reads A = [0, b), odd g reads B = [b, T).
    pub fn group_partition(&self, group: usize) -> (usize, usize) {
        if group % 2 == 0 {
            (0, self.boundary)
        } else {
            (self.boundary, self.n_temporal - self.boundary)
        }
    }
}

/// Per image and per group, the S selected mode indices in spatial order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSelection {
    // modes[(img * k + g) * S + s] = flat mode index.
    modes: Vec<u16>,
    n_images: usize,
    n_groups: usize,
    n_spatial: usize,
    n_modes: usize,
}

impl ModeSelection {
    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    /// Mode count of the layout this selection indexes into.
    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// The S mode indices of (image, group) in spatial order.
    pub fn modes_of(&self, image: usize, group: usize) -> &[u16] {
        let base = (image * self.n_groups + group) * self.n_spatial;
        &self.modes[base..base + self.n_spatial]
    }

    /// Restriction to the first `k` groups (features 0 .. k*S).
    pub fn group_prefix(&self, k: usize) -> Result<ModeSelection> {
        if k == 0 || k > self.n_groups {
            return Err(Error::invalid(format!(
                "group prefix {k} outside 1..={}",
                self.n_groups
            )));
        }
        let s = self.n_spatial;
        let mut modes = Vec::with_capacity(self.n_images * k * s);
        for img in 0..self.n_images {
            let base = img * self.n_groups * s;
            modes.extend_from_slice(&self.modes[base..base + k * s]);
        }
        Ok(ModeSelection {
            modes,
            n_images: self.n_images,
            n_groups: k,
            n_spatial: s,
            n_modes: self.n_modes,
        })
    }
}

/// Maps quantized features to mode selections: feature i belongs to group
/// i / S and spatial mode i mod S; its value is the temporal index within
/// the group's partition.
pub fn select_modes(
    q: &QuantizedFeatures,
    layout: &ModeLayout,
    k: usize,
) -> Result<ModeSelection> {
    let s = layout.n_spatial;
    if k == 0 || q.n_features() != s * k {
        return Err(Error::invalid(format!(
            "{} features do not form {k} groups of {s}",
            q.n_features()
        )));
    }
    if k > 1 && layout.boundary == layout.n_temporal {
        return Err(Error::invalid(
            "partition B is empty: boundary must be below the temporal count when k > 1",
        ));
    }
    for i in 0..q.n_features() {
        let (_, bins) = layout.group_partition(i / s);
        if q.bin_counts()[i] as usize != bins {
            return Err(Error::invalid(format!(
                "feature {i} is quantized to {} bins but its partition has {bins}",
                q.bin_counts()[i]
            )));
        }
    }
    let mut modes = Vec::with_capacity(q.n_images() * k * s);
    for img in 0..q.n_images() {
        for g in 0..k {
            let (offset, _) = layout.group_partition(g);
            for sp in 0..s {
                let feat = g * s + sp;
                let temporal = offset + q.index(img, feat) as usize;
                modes.push(layout.mode_index(sp, temporal) as u16);
            }
        }
    }
    Ok(ModeSelection {
        modes,
        n_images: q.n_images(),
        n_groups: k,
        n_spatial: s,
        n_modes: layout.n_modes(),
    })
}

/// S-bit restriction of a click pattern to one image/group's selected modes,
/// bit s = the click at spatial mode s.
pub fn extract_pattern(
    sample: &ClickPattern,
    selection: &ModeSelection,
    image: usize,
    group: usize,
) -> Result<u16> {
    if sample.n_modes() != selection.n_modes {
        return Err(Error::invalid(format!(
            "sample has {} modes but the selection indexes {}",
            sample.n_modes(),
            selection.n_modes
        )));
    }
    Ok(restrict(sample, selection.modes_of(image, group)))
}

#[inline]
fn restrict(sample: &ClickPattern, modes: &[u16]) -> u16 {
    modes
        .iter()
        .enumerate()
        .fold(0u16, |p, (s, &m)| p | (sample.bit(m as usize) as u16) << s)
}

/// Lexicographic rank of an S-bit pattern read as the bit string
/// (d_0, d_1, ..., d_{S-1}): d_0 is compared first.
fn lex_rank(pattern: u16, s: usize) -> u16 {
    pattern.reverse_bits() >> (16 - s)
}

/// An ordered set of distinct S-bit basis patterns; the order is fixed at
/// selection time and prefixes of it stay valid smaller sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisSet {
    patterns: Vec<u16>,
    n_spatial: usize,
}

impl BasisSet {
    pub fn new(patterns: Vec<u16>, n_spatial: usize) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::invalid("basis set must be non-empty"));
        }
        if n_spatial == 0 || n_spatial > 16 {
            return Err(Error::invalid("basis width must be in 1..=16"));
        }
        let limit = 1u32 << n_spatial;
        if patterns.iter().any(|&p| (p as u32) >= limit) {
            return Err(Error::invalid("basis pattern exceeds the spatial width"));
        }
        let mut seen = vec![false; limit as usize];
        for &p in &patterns {
            if seen[p as usize] {
                return Err(Error::invalid(format!("duplicate basis pattern {p:#b}")));
            }
            seen[p as usize] = true;
        }
        Ok(BasisSet { patterns, n_spatial })
    }

    pub fn patterns(&self) -> &[u16] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn n_spatial(&self) -> usize {
        self.n_spatial
    }

    /// The first `n` bases, preserving order.
    pub fn prefix(&self, n: usize) -> Result<BasisSet> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!("prefix size {n} outside 1..={}", self.len())));
        }
        Ok(BasisSet { patterns: self.patterns[..n].to_vec(), n_spatial: self.n_spatial })
    }
}

/// Checks the batch list against a selection: either one shared batch or one
/// batch per group, all with the layout's mode count.
fn check_batches(selection: &ModeSelection, batches: &[&SampleBatch]) -> Result<()> {
    if batches.len() != 1 && batches.len() != selection.n_groups {
        return Err(Error::invalid(format!(
            "expected 1 shared batch or {} per-group batches, got {}",
            selection.n_groups,
            batches.len()
        )));
    }
    for b in batches {
        if b.n_modes() != selection.n_modes {
            return Err(Error::invalid(format!(
                "batch has {} modes but the selection indexes {}",
                b.n_modes(),
                selection.n_modes
            )));
        }
    }
    Ok(())
}

fn batch_for_group<'a>(batches: &[&'a SampleBatch], group: usize) -> &'a SampleBatch {
    if batches.len() == 1 {
        batches[0]
    } else {
        batches[group]
    }
}

/// Click-pattern histograms for every distinct (group, selected-modes) pair,
/// computed once each; images sharing quantized features share histograms.
fn histogram_memo(
    selection: &ModeSelection,
    batches: &[&SampleBatch],
    images: &[usize],
) -> HashMap<(usize, Vec<u16>), Vec<u32>> {
    let s = selection.n_spatial;
    let mut keys: Vec<(usize, Vec<u16>)> = Vec::new();
    let mut seen: HashMap<(usize, Vec<u16>), ()> = HashMap::new();
    for &img in images {
        for g in 0..selection.n_groups {
            let key = (g, selection.modes_of(img, g).to_vec());
            if seen.insert(key.clone(), ()).is_none() {
                keys.push(key);
            }
        }
    }
    keys.into_par_iter()
        .map(|key| {
            let batch = batch_for_group(batches, key.0);
            let mut hist = vec![0u32; 1 << s];
            for p in batch.patterns() {
                hist[restrict(p, &key.1) as usize] += 1;
            }
            (key, hist)
        })
        .collect()
}

/// Selects the N most frequent computational bases from the training images:
/// (1) draw n1 images without replacement by seed, (2) histogram each image's
/// S-bit patterns over all its groups' samples, (3) keep each image's top-n2
/// observed patterns, (4) rank patterns by how many images kept them and
/// return the top N. Count and keep-count ties break lexicographically.
pub fn select_bases(
    selection: &ModeSelection,
    batches: &[&SampleBatch],
    n1: usize,
    n2: usize,
    n_bases: usize,
    seed: u64,
) -> Result<BasisSet> {
    check_batches(selection, batches)?;
    let s = selection.n_spatial;
    let n_patterns = 1usize << s;
    if n1 == 0 || n1 > selection.n_images {
        return Err(Error::invalid(format!(
            "basis-selection image count {n1} outside 1..={}",
            selection.n_images
        )));
    }
    if n2 == 0 || n2 > n_patterns {
        return Err(Error::invalid(format!(
            "per-image keep count {n2} outside 1..={n_patterns}"
        )));
    }
    if n_bases == 0 || n_bases > n_patterns {
        return Err(Error::invalid(format!(
            "basis count {n_bases} outside 1..={n_patterns}"
        )));
    }

    let mut order: Vec<usize> = (0..selection.n_images).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(n1);

    let memo = histogram_memo(selection, batches, &order);

    let mut keep_counts = vec![0u32; n_patterns];
    for &img in &order {
        let mut merged = vec![0u64; n_patterns];
        for g in 0..selection.n_groups {
            let key = (g, selection.modes_of(img, g).to_vec());
            for (m, &h) in merged.iter_mut().zip(&memo[&key]) {
                *m += h as u64;
            }
        }
        let mut ranked: Vec<u16> = (0..n_patterns as u16).filter(|&p| merged[p as usize] > 0).collect();
        ranked.sort_by_key(|&p| (std::cmp::Reverse(merged[p as usize]), lex_rank(p, s)));
        for &p in ranked.iter().take(n2) {
            keep_counts[p as usize] += 1;
        }
    }

    let mut kept: Vec<u16> =
        (0..n_patterns as u16).filter(|&p| keep_counts[p as usize] > 0).collect();
    if kept.len() < n_bases {
        return Err(Error::capacity(format!(
            "only {} distinct patterns were observed, cannot select {n_bases} bases",
            kept.len()
        )));
    }
    kept.sort_by_key(|&p| (std::cmp::Reverse(keep_counts[p as usize]), lex_rank(p, s)));
    kept.truncate(n_bases);
    BasisSet::new(kept, s)
}

/// Per image, the k*N raw basis frequencies in group-major order: group g's
/// block holds the frequency of each basis among g's partition samples,
/// count divided by that partition's sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyFeatures {
    matrix: DMatrix<f64>,
    n_groups: usize,
    n_bases: usize,
}

impl FrequencyFeatures {
    /// n_images x (k*N) matrix, group-major columns.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_bases(&self) -> usize {
        self.n_bases
    }

    /// Collapses the k group blocks into one N-column matrix by a weighted
    /// sum over groups (weights typically cumulative variance ratios).
    pub fn fold_groups_weighted(&self, weights: &[f64]) -> Result<DMatrix<f64>> {
        if weights.len() != self.n_groups {
            return Err(Error::invalid(format!(
                "{} weights for {} groups",
                weights.len(),
                self.n_groups
            )));
        }
        let n = self.matrix.nrows();
        let mut out = DMatrix::zeros(n, self.n_bases);
        for i in 0..n {
            for j in 0..self.n_bases {
                let mut acc = 0.0;
                for (g, &w) in weights.iter().enumerate() {
                    acc += w * self.matrix[(i, g * self.n_bases + j)];
                }
                out[(i, j)] = acc;
            }
        }
        Ok(out)
    }
}

/// Raw basis frequencies for every image, using a fixed basis set selected
/// beforehand. Standardization and sigmoid are applied downstream.
pub fn compute_frequencies(
    selection: &ModeSelection,
    batches: &[&SampleBatch],
    bases: &BasisSet,
) -> Result<FrequencyFeatures> {
    check_batches(selection, batches)?;
    if bases.n_spatial() != selection.n_spatial {
        return Err(Error::invalid(format!(
            "bases are {} bits wide but the selection has {} spatial modes",
            bases.n_spatial(),
            selection.n_spatial
        )));
    }
    let k = selection.n_groups;
    let n_bases = bases.len();
    let images: Vec<usize> = (0..selection.n_images).collect();
    let memo = histogram_memo(selection, batches, &images);

    let mut matrix = DMatrix::zeros(selection.n_images, k * n_bases);
    for img in 0..selection.n_images {
        for g in 0..k {
            let key = (g, selection.modes_of(img, g).to_vec());
            let hist = &memo[&key];
            let total = batch_for_group(batches, g).len() as f64;
            for (j, &b) in bases.patterns().iter().enumerate() {
                matrix[(img, g * n_bases + j)] = hist[b as usize] as f64 / total;
            }
        }
    }
    Ok(FrequencyFeatures { matrix, n_groups: k, n_bases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::quantize_with_bins;
    use crate::gaussian::Efficiency;
    use crate::sampler::SampleSource;
    use approx::assert_relative_eq;

    fn desk_layout() -> ModeLayout {
        ModeLayout::new(4, 4, 2).unwrap()
    }

    fn quantized(rows: Vec<Vec<f64>>, bins: &[usize]) -> QuantizedFeatures {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        quantize_with_bins(&DMatrix::from_row_slice(n, d, &flat), bins).unwrap()
    }

    fn batch_of(masks: &[u32], n_modes: usize) -> SampleBatch {
        let patterns = masks
            .iter()
            .map(|&m| ClickPattern::from_mask(m, n_modes).unwrap())
            .collect();
        SampleBatch::new(patterns, 0, SampleSource::Gbs, Efficiency::new(1.0).unwrap()).unwrap()
    }

    #[test]
    fn layout_validates_and_indexes() {
        let l = desk_layout();
        assert_eq!(l.n_modes(), 16);
        assert_eq!(l.mode_index(2, 3), 14);
        assert_eq!(l.group_partition(0), (0, 2));
        assert_eq!(l.group_partition(1), (2, 2));
        assert!(ModeLayout::new(4, 4, 0).is_err());
        assert!(ModeLayout::new(4, 4, 5).is_err());
        assert!(ModeLayout::new(5, 5, 2).is_err());
    }

    #[test]
    fn select_modes_desk_example() {
        // S=4, T=4, b=2, k=2: group 2 (1-based; partition B) with value 1
        // lands on temporal index 2+1=3.
        let l = desk_layout();
        // Feature values quantize to these indices: group 0 gets 0,1,0,1 in
        // bins of 2; group 1 gets 1,0,1,0 in bins of 2.
        let q = quantized(
            vec![vec![0.2, 0.8, 0.2, 0.8, 0.8, 0.2, 0.8, 0.2]],
            &[2, 2, 2, 2, 2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        // Group 0 (partition A): temporal = value.
        assert_eq!(sel.modes_of(0, 0), &[0, 5, 2, 7]);
        // Group 1 (partition B): temporal = 2 + value; value 1 -> temporal 3.
        assert_eq!(sel.modes_of(0, 1), &[12, 9, 14, 11]);
    }

    #[test]
    fn select_modes_single_group_uses_partition_a() {
        let l = desk_layout();
        let q = quantized(vec![vec![0.2, 0.8, 0.2, 0.8]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 1).unwrap();
        // All temporal indices below the boundary.
        assert!(sel.modes_of(0, 0).iter().all(|&m| (m as usize) / 4 < 2));
    }

    #[test]
    fn select_modes_rejects_wrong_bin_counts() {
        let l = desk_layout();
        // Group 1 must use 2 bins (partition B size), not 3.
        let q = quantized(
            vec![vec![0.2, 0.8, 0.2, 0.8, 0.8, 0.2, 0.8, 0.2]],
            &[2, 2, 2, 2, 3, 3, 3, 3],
        );
        assert!(select_modes(&q, &l, 2).is_err());
    }

    #[test]
    fn select_modes_rejects_group_count_mismatch() {
        let l = desk_layout();
        let q = quantized(vec![vec![0.2, 0.8, 0.2]], &[2, 2, 2]);
        assert!(select_modes(&q, &l, 1).is_err());
    }

    #[test]
    fn extract_pattern_trivial_and_handcrafted() {
        let l = desk_layout();
        let q = quantized(
            vec![vec![0.2, 0.8, 0.2, 0.8, 0.8, 0.2, 0.8, 0.2]],
            &[2, 2, 2, 2, 2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        let zeros = ClickPattern::from_mask(0, 16).unwrap();
        assert_eq!(extract_pattern(&zeros, &sel, 0, 0).unwrap(), 0);
        let ones = ClickPattern::from_mask(0xFFFF, 16).unwrap();
        assert_eq!(extract_pattern(&ones, &sel, 0, 0).unwrap(), 0b1111);
        // Group 0 reads modes 0,5,2,7: set modes 5 and 7 only.
        let crafted = ClickPattern::from_mask(1 << 5 | 1 << 7, 16).unwrap();
        assert_eq!(extract_pattern(&crafted, &sel, 0, 0).unwrap(), 0b1010);
        let short = ClickPattern::from_mask(0, 4).unwrap();
        assert!(extract_pattern(&short, &sel, 0, 0).is_err());
    }

    #[test]
    fn lex_rank_orders_bit_strings() {
        // Patterns (d0,d1): 00 < 01... lexicographic puts d0 first.
        assert!(lex_rank(0b00, 2) < lex_rank(0b10, 2)); // 00 < 01
        assert!(lex_rank(0b10, 2) < lex_rank(0b01, 2)); // 01 < 10
        assert!(lex_rank(0b01, 2) < lex_rank(0b11, 2)); // 10 < 11
    }

    #[test]
    fn basis_set_validates() {
        assert!(BasisSet::new(vec![0, 1, 1], 2).is_err());
        assert!(BasisSet::new(vec![4], 2).is_err());
        assert!(BasisSet::new(vec![], 2).is_err());
        let b = BasisSet::new(vec![2, 0, 1], 2).unwrap();
        assert_eq!(b.prefix(2).unwrap().patterns(), &[2, 0]);
        assert!(b.prefix(4).is_err());
    }

    #[test]
    fn select_bases_dominant_pattern_ranks_first() {
        // S=2, T=4, b=2, k=2: 8 modes. Pattern 01 dominates both groups:
        // group 0 reads modes 0,1 (temporal 0) and group 1 reads modes 4,5
        // (temporal 2), so mask 0b010001 restricts to 01 in each.
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(vec![vec![0.2, 0.2, 0.2, 0.2]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 2).unwrap();
        let masks = [0b010001u32, 0b010001, 0b010001, 0b010001, 0b11, 0b0];
        let batch = batch_of(&masks, 8);
        let bases = select_bases(&sel, &[&batch], 1, 1, 1, 7).unwrap();
        assert_eq!(bases.patterns(), &[0b01]);
    }

    #[test]
    fn select_bases_exhaustive_orders_by_keep_count_then_lex() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(vec![vec![0.2, 0.2, 0.2, 0.2]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 2).unwrap();
        // All four patterns appear; keep-counts tie at 1 image, so order is
        // lexicographic on (d0, d1): 00, 01, 10, 11 = masks 0, 1, 2, 3
        // reinterpreted with d0 the low bit: 0b00, 0b01, 0b10, 0b11 ->
        // lex order 00, 01, 10, 11 = masks 0, 2, 1, 3.
        let masks = [0b00u32, 0b01, 0b10, 0b11];
        let batch = batch_of(&masks, 8);
        let bases = select_bases(&sel, &[&batch], 1, 4, 4, 7).unwrap();
        assert_eq!(bases.patterns(), &[0b00, 0b10, 0b01, 0b11]);
    }

    #[test]
    fn select_bases_is_deterministic_and_capacity_guarded() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(
            vec![vec![0.2, 0.2, 0.7, 0.7], vec![0.7, 0.7, 0.2, 0.2], vec![0.2, 0.7, 0.2, 0.7]],
            &[2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        let masks = [0b0101u32, 0b1010, 0b01100110 & 0xFF, 0b11, 0b0];
        let batch = batch_of(&masks, 8);
        let a = select_bases(&sel, &[&batch], 3, 4, 3, 42).unwrap();
        let b = select_bases(&sel, &[&batch], 3, 4, 3, 42).unwrap();
        assert_eq!(a, b);
        // Only vacuum patterns in this batch: a request for 3 bases of
        // patterns that never occur must fail as a capacity error.
        let vac = batch_of(&[0, 0, 0], 8);
        let err = select_bases(&sel, &[&vac], 3, 4, 3, 42).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)), "{err}");
    }

    #[test]
    fn frequencies_of_identical_samples_are_unit_mass() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(vec![vec![0.2, 0.2, 0.2, 0.2]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 2).unwrap();
        // Every sample clicks modes 0,1 -> group 0 restriction 0b11; group 1
        // reads modes 4,5 (temporal 2) -> restriction 0b00.
        let batch = batch_of(&[0b11, 0b11, 0b11], 8);
        let bases = BasisSet::new(vec![0b11, 0b00, 0b01], 2).unwrap();
        let f = compute_frequencies(&sel, &[&batch], &bases).unwrap();
        let m = f.matrix();
        assert_eq!(m.nrows(), 1);
        assert_eq!(m.ncols(), 6);
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-15); // group 0, basis 11
        assert_relative_eq!(m[(0, 1)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(m[(0, 3)], 0.0, epsilon = 1e-15); // group 1, basis 11
        assert_relative_eq!(m[(0, 4)], 1.0, epsilon = 1e-15); // group 1, basis 00
    }

    #[test]
    fn frequencies_sum_to_one_over_full_basis_set() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(
            vec![vec![0.2, 0.7, 0.2, 0.7], vec![0.7, 0.2, 0.7, 0.2]],
            &[2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        // Power-of-two batch size: count/total is exact in floating point,
        // so the counting identity survives as strict equality.
        let masks = [0b0101u32, 0b1010, 0b0110, 0b11, 0b0, 0b10011001 & 0xFF, 0b111, 0b100];
        let batch = batch_of(&masks, 8);
        let all = BasisSet::new(vec![0, 1, 2, 3], 2).unwrap();
        let f = compute_frequencies(&sel, &[&batch], &all).unwrap();
        for img in 0..2 {
            for g in 0..2 {
                let sum: f64 = (0..4).map(|j| f.matrix()[(img, g * 4 + j)]).sum();
                assert_eq!(sum, 1.0, "image {img} group {g}");
            }
        }
        // A strict subset can only lose mass.
        let some = BasisSet::new(vec![0, 3], 2).unwrap();
        let fs = compute_frequencies(&sel, &[&batch], &some).unwrap();
        for img in 0..2 {
            for g in 0..2 {
                let sum: f64 = (0..2).map(|j| fs.matrix()[(img, g * 2 + j)]).sum();
                assert!(sum <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn frequencies_are_order_invariant_and_feature_equal_images_match() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(
            vec![vec![0.2, 0.7, 0.2, 0.7], vec![0.2, 0.7, 0.2, 0.7]],
            &[2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        let masks = [0b0101u32, 0b1010, 0b0110, 0b11];
        let shuffled = [0b11u32, 0b0110, 0b1010, 0b0101];
        let bases = BasisSet::new(vec![0, 1, 2, 3], 2).unwrap();
        let a = compute_frequencies(&sel, &[&batch_of(&masks, 8)], &bases).unwrap();
        let b = compute_frequencies(&sel, &[&batch_of(&shuffled, 8)], &bases).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        // Two images with equal quantized features get equal rows.
        for j in 0..8 {
            assert_eq!(a.matrix()[(0, j)], a.matrix()[(1, j)]);
        }
    }

    #[test]
    fn per_group_batches_divide_by_their_own_counts() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(vec![vec![0.2, 0.2, 0.2, 0.2]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 2).unwrap();
        let a = batch_of(&[0b11, 0b11, 0b11, 0b00], 8); // 4 samples
        let b = batch_of(&[0b110000, 0b0], 8); // 2 samples, modes 4,5 set once
        let bases = BasisSet::new(vec![0b11], 2).unwrap();
        let f = compute_frequencies(&sel, &[&a, &b], &bases).unwrap();
        assert_relative_eq!(f.matrix()[(0, 0)], 0.75, epsilon = 1e-15);
        assert_relative_eq!(f.matrix()[(0, 1)], 0.5, epsilon = 1e-15);
        // Wrong batch count is rejected.
        assert!(compute_frequencies(&sel, &[&a, &b, &a], &bases).is_err());
    }

    #[test]
    fn weighted_group_fold_matches_hand_computation() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(vec![vec![0.2, 0.2, 0.2, 0.2]], &[2, 2, 2, 2]);
        let sel = select_modes(&q, &l, 2).unwrap();
        let batch = batch_of(&[0b11, 0b00], 8);
        let bases = BasisSet::new(vec![0b11, 0b00], 2).unwrap();
        let f = compute_frequencies(&sel, &[&batch], &bases).unwrap();
        // Group 0 frequencies: [0.5, 0.5]; group 1: [0.0, 1.0].
        let folded = f.fold_groups_weighted(&[0.3, 0.7]).unwrap();
        assert_relative_eq!(folded[(0, 0)], 0.15, epsilon = 1e-12);
        assert_relative_eq!(folded[(0, 1)], 0.85, epsilon = 1e-12);
        assert!(f.fold_groups_weighted(&[1.0]).is_err());
    }

    #[test]
    fn group_prefix_keeps_leading_groups_per_image() {
        let l = ModeLayout::new(2, 4, 2).unwrap();
        let q = quantized(
            vec![vec![0.2, 0.8, 0.2, 0.8], vec![0.8, 0.2, 0.8, 0.2]],
            &[2, 2, 2, 2],
        );
        let sel = select_modes(&q, &l, 2).unwrap();
        let one = sel.group_prefix(1).unwrap();
        assert_eq!(one.n_groups(), 1);
        for img in 0..2 {
            assert_eq!(one.modes_of(img, 0), sel.modes_of(img, 0));
        }
        assert_eq!(sel.group_prefix(2).unwrap(), sel);
        assert!(sel.group_prefix(0).is_err());
        assert!(sel.group_prefix(3).is_err());
    }
}
