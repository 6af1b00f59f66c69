//! One training run end to end: data, network, training, modal snapshots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use natmode::cnn::{encode_checkpoint, forward, LayerGraph, ParamSet, StepEvent, TrainConfig, Trainer};
use natmode::data::records::{write_atomic, write_run, ChannelRow, SCHEMA_VERSION};
use natmode::data::{load_mnist, Dataset, MetricRow, ModalRow, Outcome, RunMeta, RunRecord, Split};
use natmode::modal::analyze_layer;
use natmode::nlms::NoiseConfig;
use natmode::tensor::{channel_moments, Tensor4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DatasetKind, ExperimentConfig, Variant};
use crate::CliError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Validation error recorded for a run that went unstable.
pub const UNSTABLE_VAL_ERROR: f64 = 1.0;

pub struct Data {
    pub train: Dataset,
    pub val: Dataset,
}

/// Seeded class-prototype images: each class has a fixed random 32×32
/// pattern and samples add unit Gaussian noise to it.
pub fn synthetic_split(n: usize, split: Split, seed: u64) -> Dataset {
    const SIDE: usize = 32;
    const CLASSES: usize = 10;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let protos: Vec<f64> = (0..CLASSES * SIDE * SIDE).map(|_| StandardNormal.sample(&mut proto_rng)).collect();
    let stream = match split {
        Split::Train => 1,
        Split::Val => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream << 32));
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % CLASSES;
        labels.push(c);
        for p in &protos[c * SIDE * SIDE..(c + 1) * SIDE * SIDE] {
            let g: f64 = StandardNormal.sample(&mut rng);
            data.push(p + g);
        }
    }
    let images = Tensor4::from_vec([n, 1, SIDE, SIDE], data).expect("sizes agree");
    Dataset::new(images, labels, split).expect("label count agrees")
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Data, CliError> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let (train, val) = load_mnist(&cfg.mnist_dir, cfg.train_size, cfg.val_size)?;
            Ok(Data { train, val })
        }
        DatasetKind::Synthetic => Ok(Data {
            train: synthetic_split(cfg.train_size, Split::Train, cfg.init_seed),
            val: synthetic_split(cfg.val_size, Split::Val, cfg.init_seed),
        }),
    }
}

/// The fixed analysis batch shared by every run of an experiment.
pub fn probe_batch(cfg: &ExperimentConfig, train: &Dataset) -> (Tensor4, Vec<usize>) {
    let n = cfg.probe_size.min(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0x5052_4f42);
    let mut idx = sample(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    train.batch(&idx)
}

pub fn probe_note(cfg: &ExperimentConfig, train: &Dataset) -> String {
    format!("fixed seeded subset of {} training images (init_seed {})", cfg.probe_size.min(train.len()), cfg.init_seed)
}

/// Modal and channel rows for every conv layer, measured on the probe batch
/// in training mode. The parameters themselves are left untouched.
pub fn snapshot(
    graph: &LayerGraph,
    params: &ParamSet,
    probe: &(Tensor4, Vec<usize>),
    mu: f64,
    run_id: &str,
    step: u64,
) -> natmode::Result<(Vec<ModalRow>, Vec<ChannelRow>)> {
    let mut p = params.clone();
    let (_, cache) = forward(graph, &mut p, &probe.0, &probe.1)?;
    let mut modal = Vec::new();
    let mut channels = Vec::new();
    for layer in graph.conv_layers() {
        let u = cache.unrolled(layer).expect("conv layers cache their unrolled input");
        let report = analyze_layer(u, mu, layer)?;
        modal.push(ModalRow {
            run_id: run_id.to_string(),
            layer,
            step,
            lambda_min: report.lambda_min,
            lambda_max: report.lambda_max,
            mu_max: report.mu_max,
            tau_max: report.tau_max,
            block_energy_ratio: report.block_energy_ratio,
        });
        for (channel, m) in channel_moments(u)?.iter().enumerate() {
            channels.push(ChannelRow { run_id: run_id.to_string(), layer, step, channel, mean: m.mean, variance: m.var });
        }
    }
    Ok((modal, channels))
}

/// One (variant, seed, μ) cell of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub seed: u64,
    pub mu_conv: f64,
    pub noise_alpha: f64,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        let base = format!("{}_mu{}_s{}", self.variant, self.mu_conv, self.seed);
        if self.noise_alpha > 0.0 { format!("{base}_a{}", self.noise_alpha) } else { base }
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    /// `(step, encoded checkpoint)` at each analysis step, when enabled.
    pub checkpoints: Vec<(u64, Vec<u8>)>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_step{step}.bin")
}

pub fn run_one(cfg: &ExperimentConfig, spec: &RunSpec, data: &Data) -> Result<RunOutput, CliError> {
    let graph = cfg.graph(spec.variant);
    let params = ParamSet::init(&graph, cfg.init_seed);
    let plan = cfg.update_plan(spec.variant, &graph, spec.mu_conv);
    let mut tc = TrainConfig::new(cfg.epochs, cfg.batch_size, plan, spec.seed);
    tc.divergence_loss = cfg.divergence_loss;
    if spec.noise_alpha > 0.0 {
        tc.noise = Some(NoiseConfig {
            alpha: spec.noise_alpha,
            seed: spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x4E4F_4953,
            target_layer: graph.conv_layers()[cfg.noise_conv],
            propagate_upstream: cfg.noise_upstream,
        });
    }
    let run_id = spec.run_id();
    let probe = probe_batch(cfg, &data.train);
    let mut modal = Vec::new();
    let mut channels = Vec::new();
    let mut checkpoints = Vec::new();

    let mut take = |params: &ParamSet, step: u64, modal: &mut Vec<ModalRow>, channels: &mut Vec<ChannelRow>| -> natmode::Result<()> {
        match snapshot(&graph, params, &probe, spec.mu_conv, &run_id, step) {
            Ok((m, c)) => {
                modal.extend(m);
                channels.extend(c);
            }
            // a diverging network has no meaningful spectrum; the outcome records it
            Err(natmode::Error::NonFinite { .. } | natmode::Error::NoConvergence { .. }) => {}
            Err(e) => return Err(e),
        }
        if cfg.save_checkpoints {
            checkpoints.push((step, encode_checkpoint(&graph, params)));
        }
        Ok(())
    };

    if cfg.analysis_steps.contains(&0) {
        take(&params, 0, &mut modal, &mut channels)?;
    }
    let mut trainer = Trainer::new(&graph, params, tc)?;
    let mut observer = |ev: &StepEvent| -> natmode::Result<()> {
        if cfg.analysis_steps.contains(&ev.step) {
            take(ev.params, ev.step, &mut modal, &mut channels)?;
        }
        Ok(())
    };
    let log = trainer.run(&data.train, &data.val, &mut observer)?;

    let variant = spec.variant.to_string();
    let mut metrics: Vec<MetricRow> = log
        .steps
        .iter()
        .map(|s| MetricRow {
            run_id: run_id.clone(),
            seed: spec.seed,
            mu: spec.mu_conv,
            variant: variant.clone(),
            epoch: s.epoch,
            step: s.step,
            train_loss: s.loss,
            val_error: None,
        })
        .collect();
    for &(epoch, err) in &log.val_errors {
        if let Some(row) = metrics.iter_mut().rev().find(|m| m.epoch == epoch) {
            row.val_error = Some(err);
        }
    }
    let mut notes = BTreeMap::from([("probe_batch".to_string(), probe_note(cfg, &data.train))]);
    if let Outcome::Unstable { step } = log.outcome {
        notes.insert("unstable".into(), format!("diverged at step {step}; val_error {UNSTABLE_VAL_ERROR} used in aggregation"));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.variants = vec![spec.variant];
    run_cfg.mu_conv = vec![spec.mu_conv];
    run_cfg.seeds = vec![spec.seed];
    run_cfg.noise_alpha = spec.noise_alpha;
    let meta = RunMeta {
        schema_version: SCHEMA_VERSION,
        run_id,
        code_version: CODE_VERSION.to_string(),
        config: run_cfg.to_map(),
        topology: graph.fingerprint(),
        outcome: log.outcome,
        notes,
    };
    Ok(RunOutput { record: RunRecord { meta, metrics, modal, channels }, checkpoints })
}

pub fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join("runs").join(run_id)
}

pub fn write_output(out: &Path, output: &RunOutput) -> Result<(), CliError> {
    let dir = run_dir(out, &output.record.meta.run_id);
    write_run(&output.record, &dir)?;
    for (step, bytes) in &output.checkpoints {
        write_atomic(&dir.join(checkpoint_name(*step)), bytes)?;
    }
    Ok(())
}

/// Final validation error, with unstable runs counted as [`UNSTABLE_VAL_ERROR`].
pub fn final_error(record: &RunRecord) -> f64 {
    match record.meta.outcome {
        Outcome::Unstable { .. } => UNSTABLE_VAL_ERROR,
        Outcome::Completed => record.final_val_error().unwrap_or(UNSTABLE_VAL_ERROR),
    }
}

/// Validation error after each of `epochs` epochs; epochs an unstable run
/// never reached count as [`UNSTABLE_VAL_ERROR`].
pub fn epoch_errors(record: &RunRecord, epochs: u32) -> Vec<f64> {
    let series = record.val_series();
    (1..=epochs).map(|e| series.iter().find(|(ep, _)| *ep == e).map_or(UNSTABLE_VAL_ERROR, |(_, v)| *v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetKind::Synthetic;
        cfg.train_size = 128;
        cfg.val_size = 64;
        cfg.epochs = 1;
        cfg.batch_size = 32;
        cfg.probe_size = 16;
        cfg.analysis_steps = vec![0, 2];
        cfg
    }

    #[test]
    fn synthetic_data_is_seeded_and_learnable_shape() {
        let a = synthetic_split(20, Split::Train, 3);
        let b = synthetic_split(20, Split::Train, 3);
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, synthetic_split(20, Split::Val, 3).images);
        assert_eq!(a.images.dims(), [20, 1, 32, 32]);
    }

    #[test]
    fn run_produces_rows_at_analysis_steps() {
        let cfg = tiny();
        let data = load_data(&cfg).unwrap();
        let spec = RunSpec { variant: Variant::BatchNorm, seed: 1, mu_conv: 0.1, noise_alpha: 0.0 };
        let out = run_one(&cfg, &spec, &data).unwrap();
        let rec = &out.record;
        assert_eq!(rec.metrics.len(), 4);
        assert!(rec.metrics[3].val_error.is_some());
        assert_eq!(rec.modal.len(), 4);
        assert!(rec.modal.iter().all(|m| (m.mu_max * m.lambda_max - 2.0).abs() < 1e-12));
        assert_eq!(rec.channels.iter().filter(|c| c.step == 0).count(), 1 + 6);
        assert_eq!(rec.meta.config["variant"], "BatchNorm");
        assert!(rec.meta.notes["probe_batch"].contains("16"));
    }

    #[test]
    fn divergent_run_is_recorded_not_raised() {
        let mut cfg = tiny();
        cfg.mu_other = 1e3;
        cfg.epochs = 3;
        let data = load_data(&cfg).unwrap();
        let spec = RunSpec { variant: Variant::Baseline, seed: 1, mu_conv: 1e3, noise_alpha: 0.0 };
        let out = run_one(&cfg, &spec, &data).unwrap();
        assert!(matches!(out.record.meta.outcome, Outcome::Unstable { .. }));
        assert_eq!(final_error(&out.record), UNSTABLE_VAL_ERROR);
    }
}
