//! The four subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use natmode::cnn::decode_checkpoint;
use natmode::data::records::{read_meta, write_atomic, write_csv, ChannelRow, CHANNEL_HEADER, METRICS_HEADER, MODAL_HEADER};
use natmode::data::{MetricRow, ModalRow, Outcome, RunRecord};
use rayon::prelude::*;

use crate::aggregate::{collect, noise_rows, sweep_rows, write_noise, write_sweep};
use crate::config::{ExperimentConfig, Variant};
use crate::runner::{checkpoint_name, load_data, probe_batch, run_one, snapshot, write_output, Data, RunSpec};
use crate::CliError;

fn specs(cfg: &ExperimentConfig, alphas: &[f64]) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for &mu_conv in &cfg.mu_conv {
            for &seed in &cfg.seeds {
                for &noise_alpha in alphas {
                    out.push(RunSpec { variant, seed, mu_conv, noise_alpha });
                }
            }
        }
    }
    out
}

/// Writes the effective config and, when given, the source file verbatim.
fn record_config(out: &Path, cfg: &ExperimentConfig, source: Option<&str>) -> Result<(), CliError> {
    write_atomic(&out.join("config.txt"), cfg.render().as_bytes())?;
    if let Some(text) = source {
        write_atomic(&out.join("config.source.txt"), text.as_bytes())?;
    }
    Ok(())
}

fn execute(cfg: &ExperimentConfig, specs: &[RunSpec], data: &Data, out: &Path) -> Result<Vec<RunRecord>, CliError> {
    let outputs: Vec<_> = specs.par_iter().map(|s| run_one(cfg, s, data)).collect::<Result<_, _>>()?;
    for o in &outputs {
        write_output(out, o)?;
    }
    let records: Vec<RunRecord> = outputs.into_iter().map(|o| o.record).collect();
    let metrics: Vec<&MetricRow> = records.iter().flat_map(|r| &r.metrics).collect();
    let modal: Vec<&ModalRow> = records.iter().flat_map(|r| &r.modal).collect();
    let channels: Vec<&ChannelRow> = records.iter().flat_map(|r| &r.channels).collect();
    write_csv(&out.join("metrics.csv"), &METRICS_HEADER, &metrics)?;
    write_csv(&out.join("modal.csv"), &MODAL_HEADER, &modal)?;
    write_csv(&out.join("channels.csv"), &CHANNEL_HEADER, &channels)?;
    Ok(records)
}

fn unstable_runs(records: &[RunRecord]) -> Vec<String> {
    records.iter().filter(|r| r.meta.outcome != Outcome::Completed).map(|r| format!("{}: {}", r.meta.run_id, r.meta.outcome)).collect()
}

/// One run per (variant, seed, μ).
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, source: Option<&str>, fail_on_divergence: bool) -> Result<Vec<RunRecord>, CliError> {
    cfg.validate().map_err(CliError::Config)?;
    let data = load_data(cfg)?;
    record_config(out, cfg, source)?;
    let alpha = [cfg.noise_alpha];
    let records = execute(cfg, &specs(cfg, &alpha), &data, out)?;
    let unstable = unstable_runs(&records);
    if fail_on_divergence && !unstable.is_empty() {
        return Err(CliError::Diverged(unstable));
    }
    Ok(records)
}

/// Trains the grid (unless `aggregate_only`) and writes `sweep.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, source: Option<&str>, aggregate_only: bool) -> Result<(), CliError> {
    cfg.validate().map_err(CliError::Config)?;
    let mut grid = cfg.clone();
    grid.noise_alpha = 0.0;
    if !aggregate_only {
        let data = load_data(&grid)?;
        record_config(out, &grid, source)?;
        execute(&grid, &specs(&grid, &[0.0]), &data, out)?;
    }
    let records = collect(out, &specs(&grid, &[0.0]))?;
    write_sweep(out, &sweep_rows(&grid.variants, &grid.mu_conv, &grid.seeds, &records))
}

/// Noise-study configuration: FC frozen, norm/NLMS on the second conv only.
pub fn noise_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.freeze_fc = true;
    c.norm_convs = vec![1];
    c
}

/// Clean and noisy runs for each variant, with per-epoch seed bands in `noise.csv`.
pub fn cmd_noise(cfg: &ExperimentConfig, out: &Path, source: Option<&str>) -> Result<Vec<RunRecord>, CliError> {
    let cfg = noise_config(cfg);
    let mut errors = cfg.validate().err().unwrap_or_default();
    for v in &cfg.variants {
        if !Variant::NOISE.contains(v) {
            errors.push(format!("variant: {v} is not part of the noise study (allowed: {})", Variant::NOISE.map(|v| v.name()).join(", ")));
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let alphas: Vec<f64> = if cfg.noise_alpha > 0.0 { vec![0.0, cfg.noise_alpha] } else { vec![0.0] };
    let data = load_data(&cfg)?;
    record_config(out, &cfg, source)?;
    let all = specs(&cfg, &alphas);
    let records = execute(&cfg, &all, &data, out)?;
    let mut groups = Vec::new();
    for &v in &cfg.variants {
        for &mu in &cfg.mu_conv {
            for &a in &alphas {
                let ids: Vec<String> = cfg.seeds.iter().map(|&seed| RunSpec { variant: v, seed, mu_conv: mu, noise_alpha: a }.run_id()).collect();
                let runs: Vec<&RunRecord> = records.iter().filter(|r| ids.contains(&r.meta.run_id)).collect();
                groups.push((v, a, runs));
            }
        }
    }
    write_noise(out, &noise_rows(&groups, cfg.epochs))?;
    Ok(records)
}

fn step_of(path: &Path) -> Option<u64> {
    path.file_name()?.to_str()?.strip_prefix("ckpt_step")?.strip_suffix(".bin")?.parse().ok()
}

/// Modal and channel tables for a checkpoint file or every checkpoint in a run dir.
pub fn cmd_analyze(input: &Path, fallback: &ExperimentConfig, out: &Path) -> Result<(Vec<ModalRow>, Vec<ChannelRow>), CliError> {
    let (run_dir, files): (PathBuf, Vec<PathBuf>) = if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| step_of(p).is_some())
            .collect();
        files.sort_by_key(|p| step_of(p));
        if files.is_empty() {
            return Err(CliError::Config(vec![format!(
                "{} holds no analysis checkpoints ({}); rerun with save_checkpoints=true and the wanted analysis_steps",
                input.display(),
                checkpoint_name(5)
            )]));
        }
        (input.to_path_buf(), files)
    } else if input.is_file() {
        (input.parent().unwrap_or(Path::new(".")).to_path_buf(), vec![input.to_path_buf()])
    } else {
        return Err(CliError::Io(format!("{}: no such checkpoint or run directory", input.display())));
    };

    let meta_path = run_dir.join("run.json");
    let (cfg, run_id) = if meta_path.exists() {
        let meta = read_meta(&meta_path)?;
        (ExperimentConfig::from_map(&meta.config).map_err(CliError::Config)?, meta.run_id)
    } else {
        fallback.validate().map_err(CliError::Config)?;
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (fallback.clone(), stem)
    };
    let variant = cfg.variants[0];
    let graph = cfg.graph(variant);
    let data = load_data(&cfg)?;
    let probe = probe_batch(&cfg, &data.train);

    let mut modal = Vec::new();
    let mut channels = Vec::new();
    for f in &files {
        let bytes = fs::read(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        let params = decode_checkpoint(&graph, &bytes)?;
        let (m, c) = snapshot(&graph, &params, &probe, cfg.mu_conv[0], &run_id, step_of(f).unwrap_or(0))?;
        modal.extend(m);
        channels.extend(c);
    }
    write_csv(&out.join("modal.csv"), &MODAL_HEADER, &modal)?;
    write_csv(&out.join("channels.csv"), &CHANNEL_HEADER, &channels)?;
    Ok((modal, channels))
}
