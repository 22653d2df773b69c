//! Cross-validated evaluation of the classification pipeline, plus one-axis
//! hyperparameter sweeps.
//!
//! Every fitted artifact (PCA basis, both standardizers, the computational
//! bases) is learned from training rows alone; held-out rows only pass
//! through frozen transforms. Reports keep per-fold metrics next to the
//! pooled confusion matrix so the counting identities stay checkable, and
//! record which rows each fold trained on.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{
    cumulative_variance_ratio, fit_pca, quantize_with_bins, sigmoid, transform_pca, ImageDataset,
    PcaModel, Standardizer,
};
use crate::encoding::{
    compute_frequencies, select_bases, select_modes, BasisSet, ModeLayout, ModeSelection,
};
use crate::error::{Error, Result};
use crate::gaussian::{apply_uniform_loss, Efficiency, GaussianState};
use crate::readout::{accuracy, assemble, predict, train_pinv, training_residual, ClassifierKind};
use crate::sampler::{sample_threshold_gbs, SampleBatch};

/// Stratified k-fold partition of a labelled set: per class, indices are
/// shuffled once and dealt round-robin starting at fold (class mod k), so
/// fold class counts differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    // Test indices per fold, each sorted ascending.
    folds: Vec<Vec<usize>>,
    n_items: usize,
}

impl FoldPlan {
    pub fn kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot fold an empty label set"));
        }
        if k < 2 || k > labels.len() {
            return Err(Error::invalid(format!(
                "fold count {k} outside 2..={}",
                labels.len()
            )));
        }
        let n_classes = *labels.iter().max().unwrap() as usize + 1;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        for (c, pool) in by_class.iter().enumerate() {
            if pool.len() < k {
                return Err(Error::invalid(format!(
                    "class {c} has {} images, fewer than {k} folds",
                    pool.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (c, pool) in by_class.iter_mut().enumerate() {
            pool.shuffle(&mut rng);
            for (j, &idx) in pool.iter().enumerate() {
                folds[(c + j) % k].push(idx);
            }
        }
        for fold in &mut folds {
            fold.sort_unstable();
        }
        Ok(FoldPlan { folds, n_items: labels.len() })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Held-out indices of one fold, ascending.
    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Complement of one fold, ascending.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, idxs)| idxs.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Pipeline hyperparameters shared by all folds of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub layout: ModeLayout,
    /// Feature groups k; the PCA keeps S*k components.
    pub n_groups: usize,
    /// Computational bases N kept per group.
    pub n_bases: usize,
    /// Images drawn for basis selection, capped at the fold's training size.
    pub n1: usize,
    /// Shortlist size per image, capped at 2^S.
    pub n2: usize,
    /// Ridge strength for the readout solve, relative to s_max^2.
    pub lambda: f64,
    pub basis_seed: u64,
}

impl PipelineSettings {
    fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_bases == 0 || self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid(
                "group, basis, and selection counts must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-run overrides used by the sweep harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    /// Pre-selected basis ordering per fold, skipping selection.
    pub fold_bases: Option<&'a [BasisSet]>,
    /// Evaluate with only the first n bases of the ordering.
    pub basis_count: Option<usize>,
    /// Use only the first k' feature groups, collapsing their frequencies to
    /// one block weighted by cumulative variance ratios.
    pub feature_groups: Option<usize>,
}

/// Aggregated outcome of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    kind: ClassifierKind,
    fold_train_accuracy: Vec<f64>,
    fold_test_accuracy: Vec<f64>,
    fold_residual: Vec<f64>,
    // Row-major n_classes x n_classes; row = true class, column = predicted.
    confusion: Vec<u64>,
    n_classes: usize,
    // Which rows each fold trained on; its fold's test rows never appear.
    fold_train_indices: Vec<Vec<usize>>,
    // Basis ordering each fold selected (or was handed); empty when the
    // readout has no frequency part.
    fold_bases: Vec<BasisSet>,
}

impl EvalReport {
    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.fold_test_accuracy.len()
    }

    pub fn fold_train_accuracy(&self) -> &[f64] {
        &self.fold_train_accuracy
    }

    pub fn fold_test_accuracy(&self) -> &[f64] {
        &self.fold_test_accuracy
    }

    /// Squared training residual per fold, for capacity-nesting checks.
    pub fn fold_residual(&self) -> &[f64] {
        &self.fold_residual
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Pooled confusion counts over all held-out rows, row-major with row =
    /// true class.
    pub fn confusion(&self) -> &[u64] {
        &self.confusion
    }

    pub fn fold_train_indices(&self) -> &[Vec<usize>] {
        &self.fold_train_indices
    }

    pub fn fold_bases(&self) -> &[BasisSet] {
        &self.fold_bases
    }

    pub fn mean_test_accuracy(&self) -> f64 {
        let k = self.k() as f64;
        self.fold_test_accuracy.iter().sum::<f64>() / k
    }

    /// Standard error of the fold mean (sample stddev / sqrt k); zero for a
    /// single fold.
    pub fn standard_error(&self) -> f64 {
        let k = self.k();
        if k < 2 {
            return 0.0;
        }
        let mean = self.mean_test_accuracy();
        let var = self
            .fold_test_accuracy
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (k as f64 - 1.0);
        (var / k as f64).sqrt()
    }

    /// The 2-sigma error bar usually drawn on accuracy plots.
    pub fn double_standard_error(&self) -> f64 {
        2.0 * self.standard_error()
    }

    /// Accuracy over all held-out rows at once: confusion trace over total.
    pub fn pooled_accuracy(&self) -> f64 {
        let n = self.n_classes;
        let trace: u64 = (0..n).map(|c| self.confusion[c * n + c]).sum();
        let total: u64 = self.confusion.iter().sum();
        trace as f64 / total as f64
    }
}

struct PairOutcome {
    train_accuracy: f64,
    test_accuracy: f64,
    residual: f64,
    predictions: Vec<u8>,
    bases: Option<BasisSet>,
}

// Train-fitted encoding stages up to mode selection.
struct TrainEncoding {
    pca: PcaModel,
    std1: Standardizer,
    cum_ratios: Vec<f64>,
    sel_train: ModeSelection,
}

fn partition_bins(layout: &ModeLayout, n_groups: usize) -> Vec<usize> {
    (0..layout.n_spatial() * n_groups)
        .map(|i| layout.group_partition(i / layout.n_spatial()).1)
        .collect()
}

fn select_for(
    layout: &ModeLayout,
    n_groups: usize,
    pca: &PcaModel,
    std1: &Standardizer,
    bins: &[usize],
    images: &DMatrix<f64>,
) -> Result<ModeSelection> {
    let feats = sigmoid(&std1.apply(&transform_pca(pca, images)?)?);
    select_modes(&quantize_with_bins(&feats, bins)?, layout, n_groups)
}

fn fit_encoding(settings: &PipelineSettings, train: &ImageDataset) -> Result<TrainEncoding> {
    let s = settings.layout.n_spatial();
    let m = s * settings.n_groups;
    let pca = fit_pca(train, m)?;
    let cum_ratios = cumulative_variance_ratio(&pca, s)?;
    let bins = partition_bins(&settings.layout, settings.n_groups);
    let std1 = Standardizer::fit(&transform_pca(&pca, train.pixels())?)?;
    let sel_train =
        select_for(&settings.layout, settings.n_groups, &pca, &std1, &bins, train.pixels())?;
    Ok(TrainEncoding { pca, std1, cum_ratios, sel_train })
}

fn bases_from_encoding(
    enc: &TrainEncoding,
    settings: &PipelineSettings,
    train_len: usize,
    batches: &[&SampleBatch],
) -> Result<BasisSet> {
    let n1 = settings.n1.min(train_len);
    let n2 = settings.n2.min(1usize << settings.layout.n_spatial());
    select_bases(&enc.sel_train, batches, n1, n2, settings.n_bases, settings.basis_seed)
}

/// Every train-fitted artifact of the frequency path. Applying it to new
/// images never refits anything, so it can be persisted and reloaded.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPipeline {
    layout: ModeLayout,
    n_groups: usize,
    pca: PcaModel,
    feature_standardizer: Standardizer,
    /// The full selected ordering; `basis_count` narrows what is counted.
    bases: BasisSet,
    basis_count: Option<usize>,
    feature_groups: Option<usize>,
    group_weights: Option<Vec<f64>>,
    frequency_standardizer: Standardizer,
}

impl FittedPipeline {
    pub fn layout(&self) -> &ModeLayout {
        &self.layout
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn feature_standardizer(&self) -> &Standardizer {
        &self.feature_standardizer
    }

    pub fn bases(&self) -> &BasisSet {
        &self.bases
    }

    pub fn basis_count(&self) -> Option<usize> {
        self.basis_count
    }

    pub fn feature_groups(&self) -> Option<usize> {
        self.feature_groups
    }

    pub fn group_weights(&self) -> Option<&[f64]> {
        self.group_weights.as_deref()
    }

    pub fn frequency_standardizer(&self) -> &Standardizer {
        &self.frequency_standardizer
    }

    /// Rebuilds a pipeline from persisted parts, checking shape consistency.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layout: ModeLayout,
        n_groups: usize,
        pca: PcaModel,
        feature_standardizer: Standardizer,
        bases: BasisSet,
        basis_count: Option<usize>,
        feature_groups: Option<usize>,
        group_weights: Option<Vec<f64>>,
        frequency_standardizer: Standardizer,
    ) -> Result<Self> {
        let s = layout.n_spatial();
        if n_groups == 0 || pca.n_components() != s * n_groups {
            return Err(Error::format(format!(
                "{} principal components do not form {n_groups} groups of {s}",
                pca.n_components()
            )));
        }
        if feature_standardizer.mean().len() != pca.n_components() {
            return Err(Error::format("feature standardizer width mismatch"));
        }
        if bases.n_spatial() != s {
            return Err(Error::format("basis width does not match the layout"));
        }
        if let Some(n) = basis_count {
            if n == 0 || n > bases.len() {
                return Err(Error::format("basis prefix outside the stored ordering"));
            }
        }
        match (feature_groups, &group_weights) {
            (None, None) => {}
            (Some(kp), Some(w)) if kp >= 1 && kp <= n_groups && w.len() == kp => {}
            _ => {
                return Err(Error::format(
                    "feature group restriction and weights must be absent or consistent",
                ))
            }
        }
        let n_used = basis_count.unwrap_or(bases.len());
        let width = match feature_groups {
            Some(_) => n_used,
            None => n_used * n_groups,
        };
        if frequency_standardizer.mean().len() != width {
            return Err(Error::format("frequency standardizer width mismatch"));
        }
        Ok(FittedPipeline {
            layout,
            n_groups,
            pca,
            feature_standardizer,
            bases,
            basis_count,
            feature_groups,
            group_weights,
            frequency_standardizer,
        })
    }

    /// The standardized, squashed frequency block for any image set, using
    /// only frozen artifacts.
    pub fn frequency_part(
        &self,
        images: &DMatrix<f64>,
        batches: &[&SampleBatch],
    ) -> Result<DMatrix<f64>> {
        let bins = partition_bins(&self.layout, self.n_groups);
        let sel = select_for(
            &self.layout,
            self.n_groups,
            &self.pca,
            &self.feature_standardizer,
            &bins,
            images,
        )?;
        let bases_used = match self.basis_count {
            Some(n) => self.bases.prefix(n)?,
            None => self.bases.clone(),
        };
        let (sel, slots) = match self.feature_groups {
            Some(kp) => (sel.group_prefix(kp)?, restrict_slots(batches, kp)?),
            None => (sel, batches.to_vec()),
        };
        let freq = compute_frequencies(&sel, &slots, &bases_used)?;
        let merged = match &self.group_weights {
            Some(w) => freq.fold_groups_weighted(w)?,
            None => freq.matrix().clone(),
        };
        Ok(sigmoid(&self.frequency_standardizer.apply(&merged)?))
    }
}

fn restrict_slots<'a>(batches: &[&'a SampleBatch], kp: usize) -> Result<Vec<&'a SampleBatch>> {
    if batches.len() == 1 {
        Ok(batches.to_vec())
    } else {
        if kp > batches.len() {
            return Err(Error::invalid(format!(
                "{kp} feature groups but only {} per-group batches",
                batches.len()
            )));
        }
        Ok(batches[..kp].to_vec())
    }
}

/// Fits the whole frequency path on a training set and returns the frozen
/// pipeline together with the training rows' frequency block (already
/// computed as a fit byproduct).
pub fn fit_pipeline(
    settings: &PipelineSettings,
    train: &ImageDataset,
    batches: &[&SampleBatch],
    bases_in: Option<&BasisSet>,
    basis_count: Option<usize>,
    feature_groups: Option<usize>,
) -> Result<(FittedPipeline, DMatrix<f64>)> {
    settings.validate()?;
    let enc = fit_encoding(settings, train)?;
    let bases_full = match bases_in {
        Some(b) => b.clone(),
        None => bases_from_encoding(&enc, settings, train.n_images(), batches)?,
    };
    let bases_used = match basis_count {
        Some(n) => bases_full.prefix(n)?,
        None => bases_full.clone(),
    };
    // group_prefix bounds-checks the restriction for us.
    let (sel_train, slots, weights) = match feature_groups {
        Some(kp) => (
            enc.sel_train.group_prefix(kp)?,
            restrict_slots(batches, kp)?,
            Some(enc.cum_ratios[..kp].to_vec()),
        ),
        None => (enc.sel_train, batches.to_vec(), None),
    };
    let f_train = compute_frequencies(&sel_train, &slots, &bases_used)?;
    let m_train = match &weights {
        Some(w) => f_train.fold_groups_weighted(w)?,
        None => f_train.matrix().clone(),
    };
    let std2 = Standardizer::fit(&m_train)?;
    let part = sigmoid(&std2.apply(&m_train)?);
    let pipeline = FittedPipeline {
        layout: settings.layout,
        n_groups: settings.n_groups,
        pca: enc.pca,
        feature_standardizer: enc.std1,
        bases: bases_full,
        basis_count,
        feature_groups,
        group_weights: weights,
        frequency_standardizer: std2,
    };
    Ok((pipeline, part))
}

fn run_pair(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    train: &ImageDataset,
    test: &ImageDataset,
    n_classes: usize,
    batches: &[&SampleBatch],
    bases_in: Option<&BasisSet>,
    opts: &EvalOptions,
) -> Result<PairOutcome> {
    let (freq_train, freq_test, bases) = if kind == ClassifierKind::Perceptron {
        // The raw-pixel readout never touches samples; leave the frequency
        // part as a zero-width block.
        (
            DMatrix::zeros(train.n_images(), 0),
            DMatrix::zeros(test.n_images(), 0),
            None,
        )
    } else {
        let (pipe, part_train) = fit_pipeline(
            settings,
            train,
            batches,
            bases_in,
            opts.basis_count,
            opts.feature_groups,
        )?;
        let part_test = pipe.frequency_part(test.pixels(), batches)?;
        (part_train, part_test, Some(pipe.bases))
    };
    let x_train = assemble(kind, train.pixels(), &freq_train)?;
    let x_test = assemble(kind, test.pixels(), &freq_test)?;
    let w = train_pinv(&x_train, train.labels(), n_classes, settings.lambda)?;
    let p_train = predict(&w, &x_train)?;
    let p_test = predict(&w, &x_test)?;
    Ok(PairOutcome {
        train_accuracy: accuracy(&p_train, train.labels())?,
        test_accuracy: accuracy(&p_test, test.labels())?,
        residual: training_residual(&w, &x_train, train.labels())?,
        predictions: p_test,
        bases,
    })
}

fn assemble_report(
    kind: ClassifierKind,
    n_classes: usize,
    outcomes: Vec<PairOutcome>,
    test_labels_per_fold: &[Vec<u8>],
    train_indices_per_fold: Vec<Vec<usize>>,
) -> EvalReport {
    let mut confusion = vec![0u64; n_classes * n_classes];
    for (outcome, labels) in outcomes.iter().zip(test_labels_per_fold) {
        for (&pred, &truth) in outcome.predictions.iter().zip(labels) {
            confusion[truth as usize * n_classes + pred as usize] += 1;
        }
    }
    EvalReport {
        kind,
        fold_train_accuracy: outcomes.iter().map(|o| o.train_accuracy).collect(),
        fold_test_accuracy: outcomes.iter().map(|o| o.test_accuracy).collect(),
        fold_residual: outcomes.iter().map(|o| o.residual).collect(),
        confusion,
        n_classes,
        fold_train_indices: train_indices_per_fold,
        fold_bases: outcomes.into_iter().filter_map(|o| o.bases).collect(),
    }
}

/// Cross-validated evaluation: one pipeline fit and test pass per fold.
pub fn evaluate(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    dataset: &ImageDataset,
    batches: &[&SampleBatch],
    plan: &FoldPlan,
) -> Result<EvalReport> {
    evaluate_with(kind, settings, dataset, batches, plan, &EvalOptions::default())
}

pub fn evaluate_with(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    dataset: &ImageDataset,
    batches: &[&SampleBatch],
    plan: &FoldPlan,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    settings.validate()?;
    if plan.n_items() != dataset.n_images() {
        return Err(Error::invalid(format!(
            "fold plan covers {} rows but the dataset has {}",
            plan.n_items(),
            dataset.n_images()
        )));
    }
    if let Some(fb) = opts.fold_bases {
        if fb.len() != plan.k() {
            return Err(Error::invalid(format!(
                "{} basis sets for {} folds",
                fb.len(),
                plan.k()
            )));
        }
    }
    let n_classes = dataset.n_classes();
    let outcomes: Vec<PairOutcome> = (0..plan.k())
        .into_par_iter()
        .map(|f| {
            let train_idx = plan.train_indices(f);
            debug_assert!(plan.test_indices(f).iter().all(|i| !train_idx.contains(i)));
            let train = dataset.select(&train_idx)?;
            let test = dataset.select(plan.test_indices(f))?;
            run_pair(
                kind,
                settings,
                &train,
                &test,
                n_classes,
                batches,
                opts.fold_bases.map(|fb| &fb[f]),
                opts,
            )
        })
        .collect::<Result<_>>()?;
    let test_labels: Vec<Vec<u8>> = (0..plan.k())
        .map(|f| {
            plan.test_indices(f)
                .iter()
                .map(|&i| dataset.labels()[i])
                .collect()
        })
        .collect();
    let train_indices: Vec<Vec<usize>> = (0..plan.k()).map(|f| plan.train_indices(f)).collect();
    let report = assemble_report(kind, n_classes, outcomes, &test_labels, train_indices);
    debug_assert_eq!(
        report.confusion.iter().sum::<u64>(),
        dataset.n_images() as u64
    );
    Ok(report)
}

/// Fixed-split evaluation (train once on the training set, test once on the
/// held-out set); the report has a single fold and zero standard error.
pub fn evaluate_split(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    train: &ImageDataset,
    test: &ImageDataset,
    batches: &[&SampleBatch],
) -> Result<EvalReport> {
    evaluate_split_with(kind, settings, train, test, batches, &EvalOptions::default())
}

pub fn evaluate_split_with(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    train: &ImageDataset,
    test: &ImageDataset,
    batches: &[&SampleBatch],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    settings.validate()?;
    if let Some(fb) = opts.fold_bases {
        if fb.len() != 1 {
            return Err(Error::invalid(format!(
                "{} basis sets for a single split",
                fb.len()
            )));
        }
    }
    let n_classes = train.n_classes().max(test.n_classes());
    let outcome = run_pair(
        kind,
        settings,
        train,
        test,
        n_classes,
        batches,
        opts.fold_bases.map(|fb| &fb[0]),
        opts,
    )?;
    let labels = vec![test.labels().to_vec()];
    let train_indices = vec![(0..train.n_images()).collect()];
    Ok(assemble_report(kind, n_classes, vec![outcome], &labels, train_indices))
}

/// One swept hyperparameter and its grid; everything else is held at the
/// base settings.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Basis counts evaluated as prefixes of one per-fold ordering selected
    /// at the largest grid value.
    BasisCount(Vec<usize>),
    /// Total PCA feature counts (multiples of S); each point collapses its
    /// leading groups' frequencies into one weighted block.
    FeatureCount(Vec<usize>),
    /// Sample counts evaluated on prefixes of the given batches.
    SampleCount(Vec<usize>),
    /// Transmissions; samples are regenerated per point from the pre-loss
    /// states while the per-fold bases stay fixed.
    Efficiency(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::BasisCount(_) => "basis_count",
            SweepAxis::FeatureCount(_) => "feature_count",
            SweepAxis::SampleCount(_) => "sample_count",
            SweepAxis::Efficiency(_) => "efficiency",
        }
    }

    pub fn grid_len(&self) -> usize {
        match self {
            SweepAxis::BasisCount(g) | SweepAxis::FeatureCount(g) | SweepAxis::SampleCount(g) => {
                g.len()
            }
            SweepAxis::Efficiency(g) => g.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub axis: &'static str,
    pub points: Vec<SweepPoint>,
}

/// What an efficiency sweep needs to redraw samples: the states right before
/// loss (one, or one per group), plus the base seed and count.
#[derive(Debug, Clone, Copy)]
pub struct EfficiencyRegen<'a> {
    pub pre_loss_states: &'a [GaussianState],
    pub sample_seed: u64,
    pub sample_count: usize,
}

/// Seed for the index-th regenerated batch of a sweep: far from the base
/// seed and from every other index, but a pure function of both.
pub fn derived_sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add((index + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn sweep(
    kind: ClassifierKind,
    settings: &PipelineSettings,
    dataset: &ImageDataset,
    batches: &[&SampleBatch],
    plan: &FoldPlan,
    axis: &SweepAxis,
    regen: Option<&EfficiencyRegen>,
) -> Result<SweepOutcome> {
    settings.validate()?;
    if kind == ClassifierKind::Perceptron {
        return Err(Error::invalid(
            "the raw-pixel readout ignores sampled clicks; nothing to sweep",
        ));
    }
    if axis.grid_len() == 0 {
        return Err(Error::invalid("sweep grid must be non-empty"));
    }
    let points = match axis {
        SweepAxis::BasisCount(grid) => {
            if grid.iter().any(|&n| n == 0) {
                return Err(Error::invalid("basis counts must be positive"));
            }
            let max = *grid.iter().max().unwrap();
            let mut at_max = settings.clone();
            at_max.n_bases = max;
            let base = evaluate(kind, &at_max, dataset, batches, plan)?;
            grid.iter()
                .map(|&n| {
                    let report = if n == max {
                        base.clone()
                    } else {
                        evaluate_with(
                            kind,
                            &at_max,
                            dataset,
                            batches,
                            plan,
                            &EvalOptions {
                                fold_bases: Some(base.fold_bases()),
                                basis_count: Some(n),
                                ..Default::default()
                            },
                        )?
                    };
                    Ok(SweepPoint { value: n as f64, report })
                })
                .collect::<Result<Vec<_>>>()?
        }
        SweepAxis::FeatureCount(grid) => {
            let s = settings.layout.n_spatial();
            for &f in grid {
                if f == 0 || f % s != 0 || f / s > settings.n_groups {
                    return Err(Error::invalid(format!(
                        "feature count {f} is not a positive multiple of {s} within {} groups",
                        settings.n_groups
                    )));
                }
            }
            let fold_bases = select_fold_bases(settings, dataset, batches, plan)?;
            grid.iter()
                .map(|&f| {
                    let report = evaluate_with(
                        kind,
                        settings,
                        dataset,
                        batches,
                        plan,
                        &EvalOptions {
                            fold_bases: Some(&fold_bases),
                            feature_groups: Some(f / s),
                            ..Default::default()
                        },
                    )?;
                    Ok(SweepPoint { value: f as f64, report })
                })
                .collect::<Result<Vec<_>>>()?
        }
        SweepAxis::SampleCount(grid) => grid
            .iter()
            .map(|&c| {
                let slots: Vec<SampleBatch> = batches
                    .iter()
                    .map(|b| b.prefix(c))
                    .collect::<Result<_>>()?;
                let refs: Vec<&SampleBatch> = slots.iter().collect();
                let report = evaluate(kind, settings, dataset, &refs, plan)?;
                Ok(SweepPoint { value: c as f64, report })
            })
            .collect::<Result<Vec<_>>>()?,
        SweepAxis::Efficiency(grid) => {
            let regen = regen.ok_or_else(|| {
                Error::invalid("efficiency sweep needs pre-loss states to regenerate samples")
            })?;
            if regen.pre_loss_states.len() != batches.len() {
                return Err(Error::invalid(format!(
                    "{} pre-loss states for {} batch slots",
                    regen.pre_loss_states.len(),
                    batches.len()
                )));
            }
            // Bases come from the provided default-transmission batches and
            // are then held fixed across the grid.
            let fold_bases = select_fold_bases(settings, dataset, batches, plan)?;
            let n_slots = regen.pre_loss_states.len();
            grid.iter()
                .enumerate()
                .map(|(i, &eta)| {
                    let e = Efficiency::new(eta)?;
                    let slots: Vec<SampleBatch> = regen
                        .pre_loss_states
                        .iter()
                        .enumerate()
                        .map(|(j, state)| {
                            let lossy = apply_uniform_loss(state, e)?;
                            let seed = derived_sample_seed(
                                regen.sample_seed,
                                (i * n_slots + j) as u64,
                            );
                            Ok(sample_threshold_gbs(&lossy, regen.sample_count, seed)?
                                .with_efficiency(e))
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<&SampleBatch> = slots.iter().collect();
                    let report = evaluate_with(
                        kind,
                        settings,
                        dataset,
                        &refs,
                        plan,
                        &EvalOptions {
                            fold_bases: Some(&fold_bases),
                            ..Default::default()
                        },
                    )?;
                    Ok(SweepPoint { value: eta, report })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(SweepOutcome { axis: axis.name(), points })
}

/// Per-fold basis selection without the readout stage, for sweeps that pin
/// the bases before varying something else.
pub fn select_fold_bases(
    settings: &PipelineSettings,
    dataset: &ImageDataset,
    batches: &[&SampleBatch],
    plan: &FoldPlan,
) -> Result<Vec<BasisSet>> {
    settings.validate()?;
    if plan.n_items() != dataset.n_images() {
        return Err(Error::invalid(format!(
            "fold plan covers {} rows but the dataset has {}",
            plan.n_items(),
            dataset.n_images()
        )));
    }
    (0..plan.k())
        .into_par_iter()
        .map(|f| {
            let train = dataset.select(&plan.train_indices(f))?;
            let enc = fit_encoding(settings, &train)?;
            bases_from_encoding(&enc, settings, train.n_images(), batches)
        })
        .collect()
}
