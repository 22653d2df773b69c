//! The subcommand implementations.
//!
//! Every config-driven command follows the same shape: resolve the
//! effective config (file plus seed overrides), hash it, do the work,
//! write artifacts atomically, then drop a manifest with digests and
//! timings. Loads refuse artifacts whose recorded config hash differs
//! from the current one, with a key-level diff when the producing
//! config text is still around.

use std::path::{Path, PathBuf};

use gbselm_core::data::{load_idx, ImageDataset, SplitTag};
use gbselm_core::encoding::BasisSet;
use gbselm_core::evaluation::{
    evaluate, fit_pipeline, EfficiencyRegen, EvalReport, FoldPlan, PipelineSettings, SweepAxis,
};
use gbselm_core::gaussian::{
    apply_interferometer, apply_uniform_loss, haar_random_unitary, squeezed_vacuum_state,
    Efficiency, GaussianState, SqueezingVector,
};
use gbselm_core::readout::{
    accuracy, assemble, predict, train_pinv, ClassifierKind, ReadoutWeights,
};
use gbselm_core::sampler::{
    average_clicks_per_mode, sample_coherent_clicks, sample_threshold_gbs, SampleBatch,
    SampleSource,
};
use gbselm_core::{Error, Result};
use nalgebra::DMatrix;

use crate::artifacts::{self, BasesFile, ModelFile};
use crate::config::{diff_canonical, EvalMode, ExperimentConfig};
use crate::manifest::{read_manifest, ManifestBuilder};
use crate::samplefile;

/// Effective config plus everything derived from it that commands share.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub canonical: String,
    pub hash: [u8; 32],
    pub hash_hex: String,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

impl RunContext {
    pub fn new(config: &Path, out: &Path, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::from_file(config)?;
        for o in overrides {
            cfg.apply_seed_override(o)?;
        }
        let canonical = cfg.canonical();
        let hash = cfg.hash_bytes();
        let hash_hex = cfg.hash_hex();
        Ok(RunContext {
            cfg,
            canonical,
            hash,
            hash_hex,
            out: out.to_path_buf(),
            overrides: overrides.to_vec(),
        })
    }

    fn builder(&self, command: &str) -> ManifestBuilder {
        ManifestBuilder::new(command, &self.hash_hex, &self.canonical, &self.overrides, &self.out)
    }

    fn settings(&self) -> Result<PipelineSettings> {
        Ok(PipelineSettings {
            layout: self.cfg.layout()?,
            n_groups: self.cfg.n_groups,
            n_bases: self.cfg.n_bases,
            n1: self.cfg.n1,
            n2: self.cfg.n2,
            lambda: self.cfg.lambda,
            basis_seed: self.cfg.seed_basis,
        })
    }

    fn n_slots(&self) -> usize {
        if self.cfg.per_group_networks {
            self.cfg.n_groups
        } else {
            1
        }
    }

    fn sample_paths(&self) -> Vec<PathBuf> {
        if self.cfg.per_group_networks {
            (0..self.cfg.n_groups)
                .map(|g| self.out.join(format!("samples-g{g:02}.gbss")))
                .collect()
        } else {
            vec![self.out.join("samples.gbss")]
        }
    }
}

fn squeezing_vector(cfg: &ExperimentConfig) -> Result<SqueezingVector> {
    if cfg.squeezing.len() == 1 {
        SqueezingVector::uniform(cfg.squeezing[0], cfg.n_modes())
    } else {
        SqueezingVector::new(cfg.squeezing.clone())
    }
}

/// One squeezed-and-mixed state per batch slot, before any loss. Slot j's
/// network seed is the configured unitary seed plus j.
fn pre_loss_states(ctx: &RunContext) -> Result<Vec<GaussianState>> {
    let r = squeezing_vector(&ctx.cfg)?;
    let squeezed = squeezed_vacuum_state(&r)?;
    (0..ctx.n_slots())
        .map(|j| {
            let u = haar_random_unitary(
                ctx.cfg.n_modes(),
                ctx.cfg.seed_unitary.wrapping_add(j as u64),
            )?;
            apply_interferometer(&squeezed, &u)
        })
        .collect()
}

fn draw_batches(ctx: &RunContext) -> Result<Vec<SampleBatch>> {
    let cfg = &ctx.cfg;
    let eta = Efficiency::new(cfg.efficiency)?;
    match cfg.source {
        SampleSource::Gbs => pre_loss_states(ctx)?
            .iter()
            .enumerate()
            .map(|(j, state)| {
                let lossy = apply_uniform_loss(state, eta)?;
                let seed = cfg.seed_sampling.wrapping_add(j as u64);
                Ok(sample_threshold_gbs(&lossy, cfg.sample_count, seed)?.with_efficiency(eta))
            })
            .collect(),
        SampleSource::Coherent => {
            let r = squeezing_vector(cfg)?;
            (0..ctx.n_slots())
                .map(|j| {
                    let u = haar_random_unitary(
                        cfg.n_modes(),
                        cfg.seed_unitary.wrapping_add(j as u64),
                    )?;
                    let seed = cfg.seed_sampling.wrapping_add(j as u64);
                    sample_coherent_clicks(&r, &u, eta, cfg.sample_count, seed)
                })
                .collect()
        }
    }
}

fn train_subset(cfg: &ExperimentConfig) -> Result<ImageDataset> {
    let full = load_idx(&cfg.train_images, &cfg.train_labels, SplitTag::Train)?;
    full.stratified_subset(cfg.subset_train, cfg.seed_subset)
}

fn test_subset(cfg: &ExperimentConfig) -> Result<ImageDataset> {
    let full = load_idx(&cfg.test_images, &cfg.test_labels, SplitTag::Test)?;
    // Offset keeps the two subset draws independent under one seed key.
    full.stratified_subset(cfg.subset_test, cfg.seed_subset.wrapping_add(1))
}

/// Canonical config text of a sibling manifest, if it hashes to `want`.
fn recorded_config(out: &Path, manifest_name: &str, want_hex: &str) -> Option<String> {
    let m = read_manifest(&out.join(manifest_name)).ok()?;
    (m.config_hash == want_hex).then_some(m.config)
}

fn refuse_mismatch(
    what: &str,
    artifact_hex: &str,
    recorded_text: Option<&str>,
    ctx: &RunContext,
) -> Error {
    let mut msg = format!(
        "{what} was produced under config {} but the current config hashes to {}",
        &artifact_hex[..12.min(artifact_hex.len())],
        &ctx.hash_hex[..12],
    );
    if let Some(text) = recorded_text {
        let diff = diff_canonical(text, &ctx.canonical);
        if !diff.is_empty() {
            msg.push_str("; differing keys:");
            for line in diff {
                msg.push_str("\n  ");
                msg.push_str(&line);
            }
        }
    }
    Error::config(msg)
}

fn load_sample_slots(ctx: &RunContext) -> Result<Vec<SampleBatch>> {
    let mut batches = Vec::new();
    for path in ctx.sample_paths() {
        if !path.exists() {
            return Err(Error::config(format!(
                "{} not found; run the sample command first",
                path.display()
            )));
        }
        // Header first: a stale file is refused before its payload is parsed.
        let header = samplefile::read_header(&path)?;
        if header.config_hash != ctx.hash {
            let hex = artifacts::hash_to_hex(&header.config_hash);
            let recorded = recorded_config(&ctx.out, "manifest-sample.json", &hex);
            return Err(refuse_mismatch(
                &format!("sample file {}", path.display()),
                &hex,
                recorded.as_deref(),
                ctx,
            ));
        }
        if header.count as usize != ctx.cfg.sample_count
            || header.n_modes as usize != ctx.cfg.n_modes()
        {
            return Err(Error::format(format!(
                "{}: header disagrees with the config it claims to come from",
                path.display()
            )));
        }
        let (_, batch) = samplefile::read_batch(&path)?;
        batches.push(batch);
    }
    Ok(batches)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    artifacts::atomic_write(path, text.as_bytes())
}

pub fn cmd_sample(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let ctx = RunContext::new(config, out, overrides)?;
    let mut mb = ctx.builder("sample");
    let batches = mb.time("sampling", || draw_batches(&ctx))?;
    for (path, batch) in ctx.sample_paths().iter().zip(&batches) {
        samplefile::write_batch(path, batch, ctx.hash)?;
        mb.record(path)?;
        println!(
            "wrote {} ({} patterns, {} modes, eta {})",
            path.display(),
            batch.len(),
            batch.n_modes(),
            batch.efficiency().value()
        );
    }
    mb.write(&ctx.out.join("manifest-sample.json"))?;
    Ok(())
}

pub fn cmd_select_bases(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let ctx = RunContext::new(config, out, overrides)?;
    if ctx.cfg.mode != EvalMode::Split {
        return Err(Error::config(
            "basis selection is fold-local in cv mode; run evaluate or sweep directly",
        ));
    }
    let mut mb = ctx.builder("select-bases");
    let train = mb.time("load_data", || train_subset(&ctx.cfg))?;
    let batches = mb.time("load_samples", || load_sample_slots(&ctx))?;
    let refs: Vec<&SampleBatch> = batches.iter().collect();
    let settings = ctx.settings()?;
    let (pipe, _) = mb.time("select", || {
        fit_pipeline(&settings, &train, &refs, None, None, None)
    })?;
    let path = ctx.out.join("bases.json");
    artifacts::write_json(&path, &BasesFile::new(pipe.bases(), &ctx.hash_hex))?;
    mb.record(&path)?;
    mb.write(&ctx.out.join("manifest-select-bases.json"))?;
    println!(
        "selected {} bases over {} spatial modes -> {}",
        pipe.bases().len(),
        pipe.bases().n_spatial(),
        path.display()
    );
    Ok(())
}

fn load_bases_if_present(ctx: &RunContext) -> Result<Option<BasisSet>> {
    let path = ctx.out.join("bases.json");
    if !path.exists() {
        return Ok(None);
    }
    let file: BasesFile = artifacts::read_json(&path)?;
    if file.config_hash != ctx.hash_hex {
        let recorded = recorded_config(&ctx.out, "manifest-select-bases.json", &file.config_hash);
        return Err(refuse_mismatch("bases.json", &file.config_hash, recorded.as_deref(), ctx));
    }
    Ok(Some(file.to_basis_set()?))
}

pub fn cmd_train(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let ctx = RunContext::new(config, out, overrides)?;
    if ctx.cfg.mode != EvalMode::Split {
        return Err(Error::config(
            "training one frozen model needs eval.mode = split; cv trains per fold inside evaluate",
        ));
    }
    let mut mb = ctx.builder("train");
    let train = mb.time("load_data", || train_subset(&ctx.cfg))?;
    let needs_samples = ctx.cfg.kinds.iter().any(|k| *k != ClassifierKind::Perceptron);
    let batches = if needs_samples {
        mb.time("load_samples", || load_sample_slots(&ctx))?
    } else {
        Vec::new()
    };
    let refs: Vec<&SampleBatch> = batches.iter().collect();
    let bases_in = if needs_samples { load_bases_if_present(&ctx)? } else { None };
    let settings = ctx.settings()?;
    let n_classes = train.n_classes();

    // gelm and grvfl share one fitted pipeline; fit it at most once.
    let mut fitted: Option<(gbselm_core::evaluation::FittedPipeline, DMatrix<f64>)> = None;
    for &kind in &ctx.cfg.kinds {
        let (weights, pipeline) = match kind {
            ClassifierKind::Perceptron => {
                let x = assemble(kind, train.pixels(), &DMatrix::zeros(train.n_images(), 0))?;
                let w = mb.time("train_perceptron", || {
                    train_pinv(&x, train.labels(), n_classes, settings.lambda)
                })?;
                report_train_accuracy(kind, &w, &x, &train)?;
                (w, None)
            }
            _ => {
                if fitted.is_none() {
                    fitted = Some(mb.time("fit_pipeline", || {
                        fit_pipeline(&settings, &train, &refs, bases_in.as_ref(), None, None)
                    })?);
                }
                let (pipe, part) = fitted.as_ref().unwrap();
                let x = assemble(kind, train.pixels(), part)?;
                let w = mb.time(&format!("train_{}", kind.as_str()), || {
                    train_pinv(&x, train.labels(), n_classes, settings.lambda)
                })?;
                report_train_accuracy(kind, &w, &x, &train)?;
                (w, Some(pipe.clone()))
            }
        };
        let path = ctx.out.join(format!("model-{}.json", kind.as_str()));
        let file = ModelFile::new(kind, &weights, pipeline.as_ref(), &ctx.hash_hex, &ctx.canonical);
        artifacts::write_json(&path, &file)?;
        mb.record(&path)?;
    }
    mb.write(&ctx.out.join("manifest-train.json"))?;
    Ok(())
}

fn report_train_accuracy(
    kind: ClassifierKind,
    w: &ReadoutWeights,
    x: &gbselm_core::readout::DesignMatrix,
    train: &ImageDataset,
) -> Result<()> {
    let acc = accuracy(&predict(w, x)?, train.labels())?;
    println!("trained {}: training accuracy {acc:.4}", kind.as_str());
    Ok(())
}

fn load_model(ctx: &RunContext, kind: ClassifierKind) -> Result<ModelFile> {
    let path = ctx.out.join(format!("model-{}.json", kind.as_str()));
    if !path.exists() {
        return Err(Error::config(format!(
            "{} not found; run the train command first",
            path.display()
        )));
    }
    let file: ModelFile = artifacts::read_json(&path)?;
    if file.config_hash != ctx.hash_hex {
        return Err(refuse_mismatch(
            &format!("model-{}.json", kind.as_str()),
            &file.config_hash,
            Some(&file.config),
            ctx,
        ));
    }
    if file.kind != kind.as_str() {
        return Err(Error::format(format!(
            "{} holds a {} model",
            path.display(),
            file.kind
        )));
    }
    Ok(file)
}

fn confusion_rows(n_classes: usize, counts: &[u64]) -> (String, Vec<String>) {
    let mut header = String::from("true_class");
    for c in 0..n_classes {
        header.push_str(&format!(",pred_{c}"));
    }
    let rows = (0..n_classes)
        .map(|t| {
            let mut row = t.to_string();
            for p in 0..n_classes {
                row.push_str(&format!(",{}", counts[t * n_classes + p]));
            }
            row
        })
        .collect();
    (header, rows)
}

fn accuracy_rows_from_report(kind_label: &str, report: &EvalReport) -> Vec<String> {
    let se = report.standard_error();
    (0..report.k())
        .map(|f| {
            format!(
                "{kind_label},{f},{},{},{se}",
                report.fold_train_accuracy()[f],
                report.fold_test_accuracy()[f],
            )
        })
        .collect()
}

pub fn cmd_evaluate(config: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let ctx = RunContext::new(config, out, overrides)?;
    let mut mb = ctx.builder("evaluate");
    let needs_samples = ctx.cfg.kinds.iter().any(|k| *k != ClassifierKind::Perceptron);
    let batches = if needs_samples {
        mb.time("load_samples", || load_sample_slots(&ctx))?
    } else {
        Vec::new()
    };
    let refs: Vec<&SampleBatch> = batches.iter().collect();
    let mut accuracy_rows = Vec::new();

    match ctx.cfg.mode {
        EvalMode::Split => {
            let train = mb.time("load_data", || train_subset(&ctx.cfg))?;
            let test = test_subset(&ctx.cfg)?;
            for &kind in &ctx.cfg.kinds {
                let file = load_model(&ctx, kind)?;
                let (_, w, pipe) = file.to_parts()?;
                if test.labels().iter().any(|&l| (l as usize) >= w.n_classes()) {
                    return Err(Error::invalid(
                        "test labels exceed the trained class count",
                    ));
                }
                let zero_train = DMatrix::zeros(train.n_images(), 0);
                let zero_test = DMatrix::zeros(test.n_images(), 0);
                let (freq_train, freq_test) = match &pipe {
                    None => (zero_train, zero_test),
                    Some(p) => (
                        mb.time("frequencies", || p.frequency_part(train.pixels(), &refs))?,
                        mb.time("frequencies", || p.frequency_part(test.pixels(), &refs))?,
                    ),
                };
                let x_train = assemble(kind, train.pixels(), &freq_train)?;
                let x_test = assemble(kind, test.pixels(), &freq_test)?;
                let train_acc = accuracy(&predict(&w, &x_train)?, train.labels())?;
                let predictions = predict(&w, &x_test)?;
                let test_acc = accuracy(&predictions, test.labels())?;
                accuracy_rows.push(format!("{},0,{train_acc},{test_acc},0", kind.as_str()));
                println!(
                    "{}: train accuracy {train_acc:.4}, test accuracy {test_acc:.4}",
                    kind.as_str()
                );

                let n = w.n_classes();
                let mut counts = vec![0u64; n * n];
                for (&p, &t) in predictions.iter().zip(test.labels()) {
                    counts[t as usize * n + p as usize] += 1;
                }
                let (header, rows) = confusion_rows(n, &counts);
                let path = ctx.out.join(format!("confusion-{}.csv", kind.as_str()));
                write_csv(&path, &header, &rows)?;
                mb.record(&path)?;
            }
        }
        EvalMode::Cv => {
            let train = mb.time("load_data", || train_subset(&ctx.cfg))?;
            let plan = FoldPlan::kfold(train.labels(), ctx.cfg.folds, ctx.cfg.seed_folds)?;
            let settings = ctx.settings()?;
            for &kind in &ctx.cfg.kinds {
                let report = mb.time(&format!("evaluate_{}", kind.as_str()), || {
                    evaluate(kind, &settings, &train, &refs, &plan)
                })?;
                accuracy_rows.extend(accuracy_rows_from_report(kind.as_str(), &report));
                println!(
                    "{}: mean test accuracy {:.4} +- {:.4} over {} folds",
                    kind.as_str(),
                    report.mean_test_accuracy(),
                    report.double_standard_error(),
                    report.k()
                );
                let (header, rows) = confusion_rows(report.n_classes(), report.confusion());
                let path = ctx.out.join(format!("confusion-{}.csv", kind.as_str()));
                write_csv(&path, &header, &rows)?;
                mb.record(&path)?;
            }
        }
    }

    let path = ctx.out.join("accuracy.csv");
    write_csv(&path, "axis,fold,train_acc,test_acc,se", &accuracy_rows)?;
    mb.record(&path)?;
    mb.write(&ctx.out.join("manifest-evaluate.json"))?;
    Ok(())
}

pub fn cmd_sweep(config: &Path, out: &Path, overrides: &[String], axis_name: &str) -> Result<()> {
    let ctx = RunContext::new(config, out, overrides)?;
    if ctx.cfg.mode != EvalMode::Cv {
        return Err(Error::config(
            "sweeps report fold-resolved errors; set eval.mode = cv",
        ));
    }
    let axis = match axis_name {
        "bases" => SweepAxis::BasisCount(ctx.cfg.sweep_bases.clone()),
        "features" => SweepAxis::FeatureCount(ctx.cfg.sweep_features.clone()),
        "samples" => SweepAxis::SampleCount(ctx.cfg.sweep_samples.clone()),
        "efficiency" => SweepAxis::Efficiency(ctx.cfg.sweep_efficiency.clone()),
        other => {
            return Err(Error::invalid(format!(
                "unknown sweep axis {other}; expected bases, features, samples or efficiency"
            )))
        }
    };
    let mut mb = ctx.builder("sweep");
    let train = mb.time("load_data", || train_subset(&ctx.cfg))?;
    let batches = mb.time("load_samples", || load_sample_slots(&ctx))?;
    let refs: Vec<&SampleBatch> = batches.iter().collect();
    let plan = FoldPlan::kfold(train.labels(), ctx.cfg.folds, ctx.cfg.seed_folds)?;
    let settings = ctx.settings()?;

    let states;
    let regen = if matches!(axis, SweepAxis::Efficiency(_)) {
        if ctx.cfg.source != SampleSource::Gbs {
            return Err(Error::config(
                "the efficiency sweep regenerates squeezed-light samples; samples.source must be gbs",
            ));
        }
        states = pre_loss_states(&ctx)?;
        Some(EfficiencyRegen {
            pre_loss_states: &states,
            sample_seed: ctx.cfg.seed_sampling,
            sample_count: ctx.cfg.sample_count,
        })
    } else {
        None
    };

    // The raw-pixel readout ignores clicks, so "all" sweeps the two
    // sample-driven readouts and an explicit perceptron request is refused
    // by the evaluation layer.
    let kinds: Vec<ClassifierKind> = if ctx.cfg.kind_label == "all" {
        vec![ClassifierKind::Gelm, ClassifierKind::Grvfl]
    } else {
        ctx.cfg.kinds.clone()
    };
    for kind in kinds {
        let outcome = mb.time(&format!("sweep_{}", kind.as_str()), || {
            gbselm_core::evaluation::sweep(kind, &settings, &train, &refs, &plan, &axis, regen.as_ref())
        })?;
        let mut rows = Vec::new();
        for point in &outcome.points {
            rows.extend(accuracy_rows_from_report(&point.value.to_string(), &point.report));
            println!(
                "{} {} = {}: mean test accuracy {:.4} +- {:.4}",
                kind.as_str(),
                outcome.axis,
                point.value,
                point.report.mean_test_accuracy(),
                point.report.double_standard_error()
            );
        }
        let path = ctx
            .out
            .join(format!("sweep-{}-{}.csv", outcome.axis, kind.as_str()));
        write_csv(&path, "axis,fold,train_acc,test_acc,se", &rows)?;
        mb.record(&path)?;
    }
    mb.write(&ctx.out.join("manifest-sweep.json"))?;
    Ok(())
}

pub fn cmd_diagnostics(samples: &Path, out: &Path) -> Result<()> {
    let (header, batch) = samplefile::read_batch(samples)?;
    let freqs = average_clicks_per_mode(&batch)?;
    let mut columns = Vec::with_capacity(freqs.len());
    let mut row = Vec::with_capacity(freqs.len());
    for (m, f) in freqs.iter().enumerate() {
        columns.push(format!("mode_{m}"));
        row.push(f.to_string());
    }
    let path = out.join("diagnostics.csv");
    write_csv(&path, &columns.join(","), &[row.join(",")])?;
    println!(
        "wrote {} ({} modes, {} samples, source {})",
        path.display(),
        header.n_modes,
        header.count,
        header.source.as_str()
    );
    Ok(())
}
