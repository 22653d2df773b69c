//! Flat key = value experiment configuration.
//!
//! The on-disk format is line-oriented: `#` starts a comment, blank lines
//! are skipped, nested names use dots. Every seed is explicit; nothing is
//! ever defaulted from the clock. The canonical rendering (all effective
//! keys, sorted) is what the config hash commits to, so overrides and
//! cosmetic reformatting hash the same as an equivalent file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use gbselm_core::encoding::ModeLayout;
use gbselm_core::readout::ClassifierKind;
use gbselm_core::sampler::SampleSource;
use gbselm_core::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Train on the training subset, test once on the test subset.
    Split,
    /// Stratified k-fold cross-validation over the training subset.
    Cv,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Split => "split",
            EvalMode::Cv => "cv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n_spatial: usize,
    pub n_temporal: usize,
    pub boundary: usize,
    pub n_groups: usize,
    pub pca_features: usize,
    /// One value (uniform) or one per mode.
    pub squeezing: Vec<f64>,
    pub efficiency: f64,
    pub sample_count: usize,
    pub source: SampleSource,
    pub n1: usize,
    pub n2: usize,
    pub n_bases: usize,
    /// Empty never happens; "all" expands to the three kinds.
    pub kinds: Vec<ClassifierKind>,
    pub kind_label: String,
    pub lambda: f64,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub subset_train: usize,
    pub subset_test: usize,
    pub mode: EvalMode,
    pub folds: usize,
    pub seed_unitary: u64,
    pub seed_sampling: u64,
    pub seed_basis: u64,
    pub seed_folds: u64,
    pub seed_subset: u64,
    pub per_group_networks: bool,
    pub sweep_bases: Vec<usize>,
    pub sweep_features: Vec<usize>,
    pub sweep_samples: Vec<usize>,
    pub sweep_efficiency: Vec<f64>,
}

const SEED_KEYS: [&str; 5] = [
    "seed.basis",
    "seed.folds",
    "seed.sampling",
    "seed.subset",
    "seed.unitary",
];

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::config(format!("line {}: empty key or value", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!("duplicate key {key}")));
        }
    }
    Ok(map)
}

struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn require(&mut self, key: &str) -> Result<String> {
        self.map
            .remove(key)
            .ok_or_else(|| Error::config(format!("missing required key {key}")))
    }

    fn optional(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: {v} is not a nonnegative integer")))
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: {v} is not an unsigned integer")))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::config(format!("{key}: {v} is not a number")))
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.optional(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(format!("{key}: {v} is not true or false"))),
            },
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.optional(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config(format!("{key}: bad list entry {s:?}")))
                })
                .collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let mut r = Reader { map: parse_kv(text)? };
        let kind_label = r.require("readout.kind")?;
        let kinds = match kind_label.as_str() {
            "all" => vec![
                ClassifierKind::Perceptron,
                ClassifierKind::Gelm,
                ClassifierKind::Grvfl,
            ],
            k => vec![k.parse::<ClassifierKind>()?],
        };
        let source = match r.require("samples.source")?.as_str() {
            "gbs" => SampleSource::Gbs,
            "coherent" => SampleSource::Coherent,
            s => return Err(Error::config(format!("samples.source: unknown source {s}"))),
        };
        let mode = match r.require("eval.mode")?.as_str() {
            "split" => EvalMode::Split,
            "cv" => EvalMode::Cv,
            m => return Err(Error::config(format!("eval.mode: unknown mode {m}"))),
        };
        let squeezing = r
            .require("squeezing.r")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("squeezing.r: bad entry {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut cfg = ExperimentConfig {
            n_spatial: r.usize("layout.n_spatial")?,
            n_temporal: r.usize("layout.n_temporal")?,
            boundary: r.usize("layout.boundary")?,
            n_groups: r.usize("groups")?,
            pca_features: r.usize("pca.features")?,
            squeezing,
            efficiency: r.f64("efficiency")?,
            sample_count: r.usize("samples.count")?,
            source,
            n1: r.usize("bases.n1")?,
            n2: r.usize("bases.n2")?,
            n_bases: r.usize("bases.count")?,
            kinds,
            kind_label,
            lambda: r.f64("readout.lambda")?,
            train_images: r.require("data.images.train")?,
            train_labels: r.require("data.labels.train")?,
            test_images: r.require("data.images.test")?,
            test_labels: r.require("data.labels.test")?,
            subset_train: r.usize("data.subset.train")?,
            subset_test: r.usize("data.subset.test")?,
            mode,
            folds: match r.optional("eval.folds") {
                None => 7,
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::config(format!("eval.folds: {v} is not an integer")))?,
            },
            seed_unitary: r.u64("seed.unitary")?,
            seed_sampling: r.u64("seed.sampling")?,
            seed_basis: r.u64("seed.basis")?,
            seed_folds: r.u64("seed.folds")?,
            seed_subset: r.u64("seed.subset")?,
            per_group_networks: r.bool_or("network.per_group", false)?,
            sweep_bases: r.list("sweep.bases", &[4, 8, 12, 16])?,
            sweep_features: r.list("sweep.features", &[16, 32, 48, 64])?,
            sweep_samples: r.list("sweep.samples", &[10_000, 50_000, 100_000, 500_000])?,
            sweep_efficiency: r.list("sweep.efficiency", &[0.25, 0.5, 0.75, 1.0])?,
        };
        if let Some(key) = r.map.keys().next() {
            return Err(Error::config(format!("unknown key {key}")));
        }
        // Grids stay sorted and deduplicated so sweep reports come out
        // monotonically labeled regardless of how the file lists them.
        cfg.sweep_bases.sort_unstable();
        cfg.sweep_bases.dedup();
        cfg.sweep_features.sort_unstable();
        cfg.sweep_features.dedup();
        cfg.sweep_samples.sort_unstable();
        cfg.sweep_samples.dedup();
        cfg.sweep_efficiency.sort_by(f64::total_cmp);
        cfg.sweep_efficiency.dedup();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cheap invariants, checked before any expensive work.
    pub fn validate(&self) -> Result<()> {
        // The layout and its mode-count capacity bound.
        let layout = self.layout()?;
        let n_modes = layout.n_modes();
        if self.pca_features != self.n_spatial * self.n_groups {
            return Err(Error::config(format!(
                "pca.features = {} but layout.n_spatial * groups = {}",
                self.pca_features,
                self.n_spatial * self.n_groups
            )));
        }
        if self.n_bases == 0 || self.n_bases > 1 << self.n_spatial {
            return Err(Error::config(format!(
                "bases.count = {} outside 1..=2^{}",
                self.n_bases, self.n_spatial
            )));
        }
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::config("bases.n1 and bases.n2 must be positive"));
        }
        if self.squeezing.len() != 1 && self.squeezing.len() != n_modes {
            return Err(Error::config(format!(
                "squeezing.r needs 1 or {n_modes} values, got {}",
                self.squeezing.len()
            )));
        }
        if self.squeezing.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("squeezing.r values must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::config(format!(
                "efficiency = {} outside [0, 1]",
                self.efficiency
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::config("samples.count must be positive"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("readout.lambda must be finite and nonnegative"));
        }
        if self.subset_train == 0 || self.subset_test == 0 {
            return Err(Error::config("data.subset sizes must be positive"));
        }
        if self.mode == EvalMode::Cv && self.folds < 2 {
            return Err(Error::config("eval.folds must be at least 2 in cv mode"));
        }
        if self.sweep_bases.is_empty()
            || self.sweep_features.is_empty()
            || self.sweep_samples.is_empty()
            || self.sweep_efficiency.is_empty()
        {
            return Err(Error::config("sweep grids must be non-empty"));
        }
        if self.sweep_efficiency.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::config("sweep.efficiency entries must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<ModeLayout> {
        ModeLayout::new(self.n_spatial, self.n_temporal, self.boundary)
    }

    pub fn n_modes(&self) -> usize {
        self.n_spatial * self.n_temporal
    }

    /// Applies one `--seed-override NAME=VALUE`; the name is a seed.* key.
    pub fn apply_seed_override(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("seed override {spec:?} is not NAME=VALUE")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("seed override {spec:?}: bad value")))?;
        match name.trim() {
            "seed.unitary" => self.seed_unitary = value,
            "seed.sampling" => self.seed_sampling = value,
            "seed.basis" => self.seed_basis = value,
            "seed.folds" => self.seed_folds = value,
            "seed.subset" => self.seed_subset = value,
            other => {
                return Err(Error::config(format!(
                    "unknown seed {other}; expected one of {}",
                    SEED_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// All effective keys, sorted, one per line. The hash input.
    pub fn canonical(&self) -> String {
        fn join_f64(v: &[f64]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        fn join_usize(v: &[usize]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut pairs: Vec<(&str, String)> = vec![
            ("bases.count", self.n_bases.to_string()),
            ("bases.n1", self.n1.to_string()),
            ("bases.n2", self.n2.to_string()),
            ("data.images.test", self.test_images.clone()),
            ("data.images.train", self.train_images.clone()),
            ("data.labels.test", self.test_labels.clone()),
            ("data.labels.train", self.train_labels.clone()),
            ("data.subset.test", self.subset_test.to_string()),
            ("data.subset.train", self.subset_train.to_string()),
            ("efficiency", self.efficiency.to_string()),
            ("eval.folds", self.folds.to_string()),
            ("eval.mode", self.mode.as_str().to_string()),
            ("groups", self.n_groups.to_string()),
            ("layout.boundary", self.boundary.to_string()),
            ("layout.n_spatial", self.n_spatial.to_string()),
            ("layout.n_temporal", self.n_temporal.to_string()),
            ("network.per_group", self.per_group_networks.to_string()),
            ("pca.features", self.pca_features.to_string()),
            ("readout.kind", self.kind_label.clone()),
            ("readout.lambda", self.lambda.to_string()),
            ("samples.count", self.sample_count.to_string()),
            ("samples.source", self.source.as_str().to_string()),
            ("seed.basis", self.seed_basis.to_string()),
            ("seed.folds", self.seed_folds.to_string()),
            ("seed.sampling", self.seed_sampling.to_string()),
            ("seed.subset", self.seed_subset.to_string()),
            ("seed.unitary", self.seed_unitary.to_string()),
            ("squeezing.r", join_f64(&self.squeezing)),
            ("sweep.bases", join_usize(&self.sweep_bases)),
            ("sweep.efficiency", join_f64(&self.sweep_efficiency)),
            ("sweep.features", join_usize(&self.sweep_features)),
            ("sweep.samples", join_usize(&self.sweep_samples)),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.into()
    }

    pub fn hash_hex(&self) -> String {
        self.hash_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lines of `key: recorded -> current` for two canonical renderings.
pub fn diff_canonical(recorded: &str, current: &str) -> Vec<String> {
    let parse = |text: &str| -> BTreeMap<String, String> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    };
    let a = parse(recorded);
    let b = parse(current);
    let mut out = Vec::new();
    for key in a.keys().chain(b.keys()) {
        let (va, vb) = (a.get(key), b.get(key));
        if va != vb && !out.iter().any(|l: &String| l.starts_with(key.as_str())) {
            out.push(format!(
                "{key}: {} -> {}",
                va.map_or("(absent)", |s| s.as_str()),
                vb.map_or("(absent)", |s| s.as_str())
            ));
        }
    }
    out
}
