//! Seed-band statistics over finished runs. Aggregation only reads run
//! files, so re-running it never changes its output.

use std::path::Path;

use natmode::data::records::{read_run, write_csv};
use natmode::data::RunRecord;

use crate::config::Variant;
use crate::runner::{epoch_errors, final_error, run_dir, RunSpec};
use crate::CliError;

/// Linearly interpolated quantile of sorted data (the common "type 7" rule).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Band {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Band { q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75) }
    }

    /// Second-to-third quartile spread.
    pub fn width(&self) -> f64 {
        self.q3 - self.q1
    }
}

pub const SWEEP_HEADER: [&str; 8] = ["variant", "mu", "runs", "unstable", "q1", "median", "q3", "band_width"];
pub const NOISE_HEADER: [&str; 8] = ["variant", "alpha", "epoch", "runs", "q1", "median", "q3", "band_width"];

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub mu: f64,
    pub runs: usize,
    pub unstable: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub band_width: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NoiseRow {
    pub variant: String,
    pub alpha: f64,
    pub epoch: u32,
    pub runs: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub band_width: f64,
}

/// Reads every expected run, refusing with the full list of absent ones.
pub fn collect(out: &Path, specs: &[RunSpec]) -> Result<Vec<RunRecord>, CliError> {
    let missing: Vec<String> = specs
        .iter()
        .filter(|s| !run_dir(out, &s.run_id()).join("run.json").exists())
        .map(|s| format!("{} (seed {}, mu {})", s.variant, s.seed, s.mu_conv))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingRuns(missing));
    }
    specs.iter().map(|s| Ok(read_run(&run_dir(out, &s.run_id()))?)).collect()
}

/// One row per (variant, μ) in grid order.
pub fn sweep_rows(variants: &[Variant], mus: &[f64], seeds: &[u64], records: &[RunRecord]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for v in variants {
        for &mu in mus {
            let ids: Vec<String> = seeds.iter().map(|&seed| RunSpec { variant: *v, seed, mu_conv: mu, noise_alpha: 0.0 }.run_id()).collect();
            let runs: Vec<&RunRecord> = records.iter().filter(|r| ids.contains(&r.meta.run_id)).collect();
            let errors: Vec<f64> = runs.iter().map(|r| final_error(r)).collect();
            let unstable = runs.iter().filter(|r| r.meta.outcome != natmode::data::Outcome::Completed).count();
            let band = Band::of(&errors);
            rows.push(SweepRow {
                variant: v.to_string(),
                mu,
                runs: runs.len(),
                unstable,
                q1: band.q1,
                median: band.median,
                q3: band.q3,
                band_width: band.width(),
            });
        }
    }
    rows
}

/// Per-epoch bands for each (variant, α) group of runs.
pub fn noise_rows(groups: &[(Variant, f64, Vec<&RunRecord>)], epochs: u32) -> Vec<NoiseRow> {
    let mut rows = Vec::new();
    for (v, alpha, runs) in groups {
        let per_run: Vec<Vec<f64>> = runs.iter().map(|r| epoch_errors(r, epochs)).collect();
        for e in 0..epochs as usize {
            let vals: Vec<f64> = per_run.iter().map(|s| s[e]).collect();
            let band = Band::of(&vals);
            rows.push(NoiseRow {
                variant: v.to_string(),
                alpha: *alpha,
                epoch: e as u32 + 1,
                runs: runs.len(),
                q1: band.q1,
                median: band.median,
                q3: band.q3,
                band_width: band.width(),
            });
        }
    }
    rows
}

pub fn write_sweep(out: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    Ok(write_csv(&out.join("sweep.csv"), &SWEEP_HEADER, rows)?)
}

pub fn write_noise(out: &Path, rows: &[NoiseRow]) -> Result<(), CliError> {
    Ok(write_csv(&out.join("noise.csv"), &NOISE_HEADER, rows)?)
}
