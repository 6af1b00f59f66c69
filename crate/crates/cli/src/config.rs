//! Experiment configuration: a flat `key=value` text file plus CLI overrides.
//!
//! Lines starting with `#` and blank lines are ignored. List values are
//! comma-separated. Rendering is canonical (fixed key order, shortest float
//! form) so a rendered config parses back to the same value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use natmode::cnn::{lenet, LayerGraph, NormPlan, UpdatePlan};
use natmode::nlms::NormKind;
use natmode::norm::{NormVariant, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    BatchNorm,
    BnAmplify,
    BnSuppress,
    BnPrior,
    NlmsL1,
    NlmsL2,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Baseline, Variant::BatchNorm, Variant::BnAmplify, Variant::BnSuppress, Variant::BnPrior, Variant::NlmsL1, Variant::NlmsL2];

    /// Variants allowed in the noise study.
    pub const NOISE: [Variant; 5] = [Variant::Baseline, Variant::BatchNorm, Variant::BnPrior, Variant::NlmsL1, Variant::NlmsL2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::BatchNorm => "BatchNorm",
            Variant::BnAmplify => "BN_Amplify",
            Variant::BnSuppress => "BN_Suppress",
            Variant::BnPrior => "BN_Prior",
            Variant::NlmsL1 => "NLMS_L1",
            Variant::NlmsL2 => "NLMS_L2",
        }
    }

    fn norm(self) -> Option<(NormVariant, Placement)> {
        match self {
            Variant::BatchNorm => Some((NormVariant::Standard, Placement::AfterConv)),
            Variant::BnAmplify => Some((NormVariant::Amplify, Placement::AfterConv)),
            Variant::BnSuppress => Some((NormVariant::Suppress, Placement::AfterConv)),
            Variant::BnPrior => Some((NormVariant::Standard, Placement::BeforeConv)),
            _ => None,
        }
    }

    fn nlms(self) -> Option<NormKind> {
        match self {
            Variant::NlmsL1 => Some(NormKind::L1),
            Variant::NlmsL2 => Some(NormKind::L2),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant '{s}' (expected one of {})", Variant::ALL.map(|v| v.name()).join(", ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(format!("unknown dataset '{s}' (expected mnist or synthetic)")),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub mu_conv: Vec<f64>,
    pub mu_other: f64,
    pub seeds: Vec<u64>,
    pub epochs: u32,
    pub batch_size: usize,
    /// Steps at which modal reports are taken; 0 means before the first update.
    pub analysis_steps: Vec<u64>,
    pub probe_size: usize,
    pub save_checkpoints: bool,
    pub noise_alpha: f64,
    pub noise_upstream: bool,
    /// Conv ordinal (0 = first conv) whose local error receives noise.
    pub noise_conv: usize,
    pub freeze_fc: bool,
    /// Conv ordinals that receive the variant's norm layer or NLMS update.
    pub norm_convs: Vec<usize>,
    pub init_seed: u64,
    pub bn_eps: f64,
    pub threshold: f64,
    /// Batch loss above which a run counts as diverged.
    pub divergence_loss: f64,
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variants: vec![Variant::Baseline],
            mu_conv: vec![0.1],
            mu_other: 0.1,
            seeds: vec![1, 2, 3],
            epochs: 5,
            batch_size: 64,
            analysis_steps: vec![5],
            probe_size: 256,
            save_checkpoints: false,
            noise_alpha: 0.0,
            noise_upstream: false,
            noise_conv: 1,
            freeze_fc: false,
            norm_convs: vec![0, 1],
            init_seed: 2021,
            bn_eps: 1e-5,
            threshold: 1.0,
            divergence_loss: DEFAULT_DIVERGENCE_LOSS,
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_size: 10000,
            val_size: 2000,
        }
    }
}

/// `100·ln(10)`: a hundred times the loss of a uniform guess over ten classes.
pub const DEFAULT_DIVERGENCE_LOSS: f64 = 230.25850929940458;

pub const KEYS: [&str; 22] = [
    "variant",
    "mu_conv",
    "mu_other",
    "seeds",
    "epochs",
    "batch_size",
    "analysis_steps",
    "probe_size",
    "save_checkpoints",
    "noise_alpha",
    "noise_upstream",
    "noise_conv",
    "freeze_fc",
    "norm_convs",
    "init_seed",
    "bn_eps",
    "threshold",
    "divergence_loss",
    "dataset",
    "mnist_dir",
    "train_size",
    "val_size",
];

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| s.parse::<T>().map_err(|e| format!("'{s}': {e}"))).collect()
}

fn one<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| format!("'{v}': {e}"))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Full-scale settings: 20 epochs, 5 seeds, the whole dataset.
    pub fn paper_scale(mut self) -> Self {
        self.epochs = 20;
        self.seeds = vec![1, 2, 3, 4, 5];
        self.train_size = 60000;
        self.val_size = 10000;
        self
    }

    /// Sets one key. Errors name the key and the offending value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let r: Result<(), String> = (|| {
            match key {
                "variant" => self.variants = list(value)?,
                "mu_conv" => self.mu_conv = list(value)?,
                "mu_other" => self.mu_other = one(value)?,
                "seeds" => self.seeds = list(value)?,
                "epochs" => self.epochs = one(value)?,
                "batch_size" => self.batch_size = one(value)?,
                "analysis_steps" => self.analysis_steps = list(value)?,
                "probe_size" => self.probe_size = one(value)?,
                "save_checkpoints" => self.save_checkpoints = one(value)?,
                "noise_alpha" => self.noise_alpha = one(value)?,
                "noise_upstream" => self.noise_upstream = one(value)?,
                "noise_conv" => self.noise_conv = one(value)?,
                "freeze_fc" => self.freeze_fc = one(value)?,
                "norm_convs" => self.norm_convs = list(value)?,
                "init_seed" => self.init_seed = one(value)?,
                "bn_eps" => self.bn_eps = one(value)?,
                "threshold" => self.threshold = one(value)?,
                "divergence_loss" => self.divergence_loss = one(value)?,
                "dataset" => self.dataset = one(value)?,
                "mnist_dir" => self.mnist_dir = PathBuf::from(value.trim()),
                "train_size" => self.train_size = one(value)?,
                "val_size" => self.val_size = one(value)?,
                _ => return Err("unknown key".into()),
            }
            Ok(())
        })();
        r.map_err(|e| format!("{key}: {e}"))
    }

    /// Applies every `key=value` line of `text`, collecting all errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errors.push(format!("line {}: {e}", no + 1));
                    }
                }
                None => errors.push(format!("line {}: expected key=value, got '{line}'", no + 1)),
            }
        }
        if errors.is_empty() { Ok(()) } else { Err(errors) }
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, Vec<String>> {
        let mut cfg = ExperimentConfig::default();
        let errors: Vec<String> = map.iter().filter_map(|(k, v)| cfg.set(k, v).err()).collect();
        if errors.is_empty() { Ok(cfg) } else { Err(errors) }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let values = [
            join(&self.variants),
            join(&self.mu_conv),
            self.mu_other.to_string(),
            join(&self.seeds),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            join(&self.analysis_steps),
            self.probe_size.to_string(),
            self.save_checkpoints.to_string(),
            self.noise_alpha.to_string(),
            self.noise_upstream.to_string(),
            self.noise_conv.to_string(),
            self.freeze_fc.to_string(),
            join(&self.norm_convs),
            self.init_seed.to_string(),
            self.bn_eps.to_string(),
            self.threshold.to_string(),
            self.divergence_loss.to_string(),
            self.dataset.to_string(),
            self.mnist_dir.display().to_string(),
            self.train_size.to_string(),
            self.val_size.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Canonical `key=value` text, one key per line in [`KEYS`] order.
    pub fn render(&self) -> String {
        let map = self.to_map();
        KEYS.iter().map(|k| format!("{k}={}\n", map[*k])).collect()
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut e = Vec::new();
        if self.variants.is_empty() {
            e.push("variant: at least one variant is required".to_string());
        }
        if self.mu_conv.is_empty() {
            e.push("mu_conv: the grid is empty".into());
        }
        if self.mu_conv.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            e.push("mu_conv: rates must be finite and non-negative".into());
        }
        if !(self.mu_other.is_finite() && self.mu_other >= 0.0) {
            e.push("mu_other: must be finite and non-negative".into());
        }
        if self.seeds.is_empty() {
            e.push("seeds: at least one seed is required".into());
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            e.push("seeds: duplicate seeds".into());
        }
        if self.epochs == 0 {
            e.push("epochs: must be positive".into());
        }
        if self.batch_size == 0 {
            e.push("batch_size: must be positive".into());
        }
        if self.probe_size < 2 {
            e.push("probe_size: need at least 2 images".into());
        }
        if !(self.noise_alpha.is_finite() && self.noise_alpha >= 0.0) {
            e.push("noise_alpha: must be finite and non-negative".into());
        }
        if self.noise_conv > 1 {
            e.push("noise_conv: the reference network has conv ordinals 0 and 1".into());
        }
        if self.norm_convs.iter().any(|&c| c > 1) {
            e.push("norm_convs: the reference network has conv ordinals 0 and 1".into());
        }
        if !(self.bn_eps > 0.0) {
            e.push("bn_eps: must be positive".into());
        }
        if !(self.divergence_loss > 0.0) {
            e.push("divergence_loss: must be positive".into());
        }
        if !(self.threshold > 0.0) {
            e.push("threshold: must be positive".into());
        }
        if self.train_size == 0 || self.val_size == 0 {
            e.push("train_size/val_size: must be positive".into());
        }
        if e.is_empty() { Ok(()) } else { Err(e) }
    }

    pub fn graph(&self, variant: Variant) -> LayerGraph {
        match variant.norm() {
            Some((nv, placement)) => {
                let mut plan = NormPlan::new(nv, placement, self.norm_convs.clone());
                plan.eps = self.bn_eps;
                plan.threshold = self.threshold;
                lenet(Some(&plan))
            }
            None => lenet(None),
        }
    }

    pub fn update_plan(&self, variant: Variant, graph: &LayerGraph, mu_conv: f64) -> UpdatePlan {
        let mut plan = UpdatePlan::sgd(mu_conv, self.mu_other);
        plan.freeze_fc = self.freeze_fc;
        if let Some(kind) = variant.nlms() {
            let convs = graph.conv_layers();
            plan.nlms = self.norm_convs.iter().map(|&o| (convs[o], kind)).collect();
        }
        plan
    }
}
