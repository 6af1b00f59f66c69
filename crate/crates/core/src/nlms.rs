//! Normalized (NLMS) weight updates for convolution layers, the minimum
//! disturbance audit, and gradient-noise injection into local errors.
//!
//! For output channel `o`, input channel block `i`, in-block offset `z` and
//! output pixel `m` of sample `b`:
//!
//! ```text
//! Δw[o,i,z] = −μ/(B·M) · Σ_b Σ_m δ[o,b,m] · x[i,z,(b,m)] / (‖X_i^(b,m)‖ + ε)
//! ```
//!
//! where `‖X_i^(b,m)‖` is the squared L2 norm (or the L1 norm) of the channel-`i`
//! sub-patch feeding pixel `m`, and `δ` is the per-sample local error
//! `∂J_b/∂y`. The update is subtracted because `δ` is a loss gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::UnrolledInput;

pub const DEFAULT_STABILIZER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlmsConfig {
    pub norm_kind: NormKind,
    /// Added to every denominator; keeps dead (all-zero) sub-patches finite.
    pub stabilizer: f64,
    pub mu: f64,
}

impl NlmsConfig {
    pub fn new(norm_kind: NormKind, mu: f64) -> Self {
        NlmsConfig { norm_kind, stabilizer: DEFAULT_STABILIZER, mu }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stabilizer > 0.0) {
            return Err(Error::Invalid(format!("NLMS stabilizer must be positive, got {}", self.stabilizer)));
        }
        Ok(())
    }
}

fn check_error_shape(unrolled: &UnrolledInput, out_channels: usize, error: &[f64]) -> Result<()> {
    if unrolled.rows() == 0 || unrolled.geometry().block_len() == 0 {
        return Err(Error::Invalid("zero-length patch".into()));
    }
    if error.len() != out_channels * unrolled.cols() {
        return Err(Error::Shape(format!(
            "local error has {} entries, expected {} output channels x {} columns",
            error.len(),
            out_channels,
            unrolled.cols()
        )));
    }
    Ok(())
}

/// Per-column, per-channel sub-patch norms, laid out `[channel][column]`.
fn subpatch_norms(unrolled: &UnrolledInput, kind: NormKind) -> Vec<f64> {
    let n = unrolled.cols();
    let blocks = unrolled.channel_blocks();
    let mut norms = vec![0.0; blocks.len() * n];
    for blk in &blocks {
        let dst = &mut norms[blk.channel * n..(blk.channel + 1) * n];
        for r in blk.rows.clone() {
            for (d, x) in dst.iter_mut().zip(unrolled.row(r)) {
                *d += match kind {
                    NormKind::L2 => x * x,
                    NormKind::L1 => x.abs(),
                };
            }
        }
    }
    norms
}

/// Weight change produced by one NLMS step, `OC × K` row-major.
///
/// `local_error` is channel-major (`OC × samples·M`) and holds per-sample
/// local errors.
pub fn nlms_conv_delta(unrolled: &UnrolledInput, local_error: &[f64], out_channels: usize, cfg: &NlmsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_error_shape(unrolled, out_channels, local_error)?;
    let (k, n) = (unrolled.rows(), unrolled.cols());
    let z = unrolled.geometry().block_len();
    let norms = subpatch_norms(unrolled, cfg.norm_kind);
    let scale = -cfg.mu / n as f64;
    let mut delta = vec![0.0; out_channels * k];
    let mut weighted = vec![0.0; n];
    for o in 0..out_channels {
        let err = &local_error[o * n..(o + 1) * n];
        for i in 0..k / z {
            let den = &norms[i * n..(i + 1) * n];
            for ((w, e), d) in weighted.iter_mut().zip(err).zip(den) {
                *w = e / (d + cfg.stabilizer);
            }
            for zz in 0..z {
                let row = i * z + zz;
                let acc: f64 = unrolled.row(row).iter().zip(&weighted).map(|(x, w)| x * w).sum();
                delta[o * k + row] = scale * acc;
            }
        }
    }
    Ok(delta)
}

/// Applies [`nlms_conv_delta`] to `weights` in place.
pub fn nlms_conv_update(weights: &mut [f64], unrolled: &UnrolledInput, local_error: &[f64], out_channels: usize, cfg: &NlmsConfig) -> Result<()> {
    if weights.len() != out_channels * unrolled.rows() {
        return Err(Error::Shape(format!("weights have {} entries, expected {}", weights.len(), out_channels * unrolled.rows())));
    }
    let delta = nlms_conv_delta(unrolled, local_error, out_channels, cfg)?;
    for (w, d) in weights.iter_mut().zip(delta) {
        *w += d;
    }
    Ok(())
}

/// `γ² + β²`: the channel power a learned affine transform restores after normalization.
pub fn learned_param_denominator(gamma: f64, beta: f64) -> f64 {
    gamma * gamma + beta * beta
}

/// Weight change `−μ Σ_col δ·x / max(d_i, floor)` with one fixed
/// denominator per input channel block.
///
/// With `d_i = 1` this is exactly the plain gradient step on a batch-mean
/// local error. Passing channel variances or `γ_i² + β_i²` gives the
/// variance-normalized forms of the update.
pub fn channel_normalized_delta(
    unrolled: &UnrolledInput,
    local_error: &[f64],
    out_channels: usize,
    denominators: &[f64],
    mu: f64,
    floor: f64,
) -> Result<Vec<f64>> {
    check_error_shape(unrolled, out_channels, local_error)?;
    let geom = unrolled.geometry();
    if denominators.len() != geom.in_channels {
        return Err(Error::Shape(format!("{} denominators for {} channels", denominators.len(), geom.in_channels)));
    }
    let (k, n) = (unrolled.rows(), unrolled.cols());
    let z = geom.block_len();
    let mut delta = vec![0.0; out_channels * k];
    crate::gemm::matmul_bt(out_channels, n, k, 1.0, local_error, unrolled.data(), 0.0, &mut delta);
    for o in 0..out_channels {
        for row in 0..k {
            delta[o * k + row] *= -mu / denominators[row / z].max(floor);
        }
    }
    Ok(delta)
}

/// Outcome of a single-output minimum-disturbance check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmdAudit {
    /// `d − W'ᵀx`.
    pub residual: f64,
    /// `‖W' − W‖²`.
    pub update_norm_sq: f64,
}

/// Checks how well `updated` meets the constraint `d = W'ᵀx` and how far it moved.
pub fn pmd_audit_scalar(weights: &[f64], x: &[f64], desired: f64, updated: &[f64]) -> PmdAudit {
    let out: f64 = updated.iter().zip(x).map(|(w, v)| w * v).sum();
    let update_norm_sq = updated.iter().zip(weights).map(|(a, b)| (a - b) * (a - b)).sum();
    PmdAudit { residual: desired - out, update_norm_sq }
}

/// The exact minimum-norm update that reaches `desired`: `W + (d − Wᵀx)·x/‖x‖²`.
pub fn nlms_scalar_step(weights: &[f64], x: &[f64], desired: f64, mu: f64) -> Vec<f64> {
    let y: f64 = weights.iter().zip(x).map(|(w, v)| w * v).sum();
    let power: f64 = x.iter().map(|v| v * v).sum();
    let gain = mu * (desired - y) / power;
    weights.iter().zip(x).map(|(w, v)| w + gain * v).collect()
}

/// One audited step of a convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PmdEntry {
    pub step: u64,
    pub out_channel: usize,
    /// `d^(m) − W'ᵀX^(m)` per output pixel, with `d^(m) = y^(m) − δ^(m)`.
    pub residuals: Vec<f64>,
    pub update_norm_sq: f64,
}

/// Per-step record of minimum-disturbance residuals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PmdLedger {
    pub entries: Vec<PmdEntry>,
}

impl PmdLedger {
    /// Records residuals for one output channel of a conv layer across all
    /// columns of `unrolled`, given the weights before and after the step,
    /// the pre-step outputs `y` and the local errors `delta` (both `samples·M` long).
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        step: u64,
        out_channel: usize,
        w_before: &[f64],
        w_after: &[f64],
        unrolled: &UnrolledInput,
        y: &[f64],
        delta: &[f64],
    ) {
        let (k, n) = (unrolled.rows(), unrolled.cols());
        assert_eq!(w_after.len(), k);
        let mut residuals = Vec::with_capacity(n);
        for col in 0..n {
            let desired = y[col] - delta[col];
            let out: f64 = (0..k).map(|r| w_after[r] * unrolled.get(r, col)).sum();
            residuals.push(desired - out);
        }
        let update_norm_sq = w_after.iter().zip(w_before).map(|(a, b)| (a - b) * (a - b)).sum();
        self.entries.push(PmdEntry { step, out_channel, residuals, update_norm_sq });
    }
}

/// Gradient-noise injection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Multiplier on the local error's standard deviation.
    pub alpha: f64,
    pub seed: u64,
    /// Graph index of the conv layer whose local error is perturbed.
    pub target_layer: usize,
    /// Whether the perturbed error also flows to upstream layers.
    pub propagate_upstream: bool,
}

/// Seeded Gaussian stream used to perturb local errors.
#[derive(Debug, Clone)]
pub struct NoiseInjector {
    pub config: NoiseConfig,
    rng: ChaCha8Rng,
}

impl NoiseInjector {
    pub fn new(config: NoiseConfig) -> Self {
        NoiseInjector { rng: ChaCha8Rng::seed_from_u64(config.seed), config }
    }

    /// `E ← E + α·σ_E·g`, with `σ_E` the population standard deviation of all of `E`.
    pub fn inject(&mut self, error: &mut [f64]) {
        inject_noise(error, self.config.alpha, &mut self.rng);
    }
}

pub fn inject_noise(error: &mut [f64], alpha: f64, rng: &mut ChaCha8Rng) {
    if error.is_empty() || alpha == 0.0 {
        return;
    }
    let n = error.len() as f64;
    let mean = error.iter().sum::<f64>() / n;
    let sigma = (error.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
    if sigma == 0.0 {
        return;
    }
    let scale = alpha * sigma;
    for e in error.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *e += scale * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{im2col_batch, ConvGeometry, Tensor4, UnrollLayout};
    use rand::Rng;

    fn single_column(x: &[f64]) -> UnrolledInput {
        let lay = UnrollLayout::new(ConvGeometry { in_channels: 1, out_channels: 1, kernel_h: 1, kernel_w: x.len(), stride: 1, padding: 0 }, 1, x.len()).unwrap();
        UnrolledInput::from_parts(lay, 1, x.to_vec()).unwrap()
    }

    #[test]
    fn zero_error_leaves_weights() {
        let u = single_column(&[1.0, 2.0, 3.0]);
        let mut w = vec![0.5, -0.5, 0.25];
        let before = w.clone();
        nlms_conv_update(&mut w, &u, &[0.0], 1, &NlmsConfig::new(NormKind::L2, 1.0)).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn single_pixel_arithmetic() {
        let u = single_column(&[3.0, 4.0]);
        let cfg = NlmsConfig { norm_kind: NormKind::L2, stabilizer: f64::MIN_POSITIVE, mu: 1.0 };
        let d = nlms_conv_delta(&u, &[-1.0], 1, &cfg).unwrap();
        assert!((d[0] - 0.12).abs() < 1e-15 && (d[1] - 0.16).abs() < 1e-15);
        let cfg = NlmsConfig { norm_kind: NormKind::L1, ..cfg };
        let d = nlms_conv_delta(&u, &[-1.0], 1, &cfg).unwrap();
        assert!((d[0] - 3.0 / 7.0).abs() < 1e-15 && (d[1] - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let u = single_column(&[1.0, 2.0]);
        let bad = NlmsConfig { norm_kind: NormKind::L2, stabilizer: 0.0, mu: 1.0 };
        assert!(nlms_conv_delta(&u, &[1.0], 1, &bad).is_err());
        assert!(nlms_conv_delta(&u, &[1.0, 2.0], 1, &NlmsConfig::new(NormKind::L2, 1.0)).is_err());
    }

    /// Literal per-weight loop: for every (o, i, z) walk every sample and pixel.
    fn loop_oracle(x: &Tensor4, g: &ConvGeometry, err: &[f64], cfg: &NlmsConfig) -> Vec<f64> {
        let [b, _, h, w] = x.dims();
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let m_total = oh * ow;
        let tap = |s: usize, c: usize, oy: usize, ox: usize, ky: usize, kx: usize| {
            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w { 0.0 } else { x.get(s, c, iy as usize, ix as usize) }
        };
        let mut out = vec![0.0; g.out_channels * g.patch_len()];
        for o in 0..g.out_channels {
            for i in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let mut acc = 0.0;
                        for s in 0..b {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut norm = 0.0;
                                    for qy in 0..g.kernel_h {
                                        for qx in 0..g.kernel_w {
                                            let v = tap(s, i, oy, ox, qy, qx);
                                            norm += if cfg.norm_kind == NormKind::L2 { v * v } else { v.abs() };
                                        }
                                    }
                                    let delta = err[o * b * m_total + s * m_total + oy * ow + ox];
                                    acc += delta / (norm + cfg.stabilizer) * tap(s, i, oy, ox, ky, kx);
                                }
                            }
                        }
                        out[o * g.patch_len() + (i * g.kernel_h + ky) * g.kernel_w + kx] = -cfg.mu * acc / (b * m_total) as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [NormKind::L1, NormKind::L2] {
            let g = ConvGeometry::new(3, 2, 3, 1, 1);
            let x = Tensor4::from_vec([2, 3, 5, 4], (0..120).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let u = im2col_batch(&x, &g).unwrap();
            let err: Vec<f64> = (0..2 * u.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = NlmsConfig::new(kind, 0.7);
            let fast = nlms_conv_delta(&u, &err, 2, &cfg).unwrap();
            let slow = loop_oracle(&x, &g, &err, &cfg);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn l2_direction_is_scale_invariant_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let g = ConvGeometry::new(2, 1, 2, 1, 0);
        let x = Tensor4::from_vec([1, 2, 4, 4], (0..32).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let u = im2col_batch(&x, &g).unwrap();
        let err: Vec<f64> = (0..u.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = NlmsConfig { norm_kind: NormKind::L2, stabilizer: 1e-300, mu: 1.0 };
        let base = nlms_conv_delta(&u, &err, 1, &cfg).unwrap();
        let c = 7.5;
        let mut scaled = u.clone();
        scaled.scale_channel(1, c);
        let after = nlms_conv_delta(&scaled, &err, 1, &cfg).unwrap();
        for r in 0..4 {
            assert!((after[r] - base[r]).abs() <= 1e-10 * base[r].abs().max(1e-12));
            assert!((after[4 + r] - base[4 + r] / c).abs() <= 1e-10 * base[4 + r].abs().max(1e-12));
        }
    }

    #[test]
    fn learned_denominator_values() {
        assert_eq!(learned_param_denominator(1.0, 0.0), 1.0);
        assert_eq!(learned_param_denominator(2.0, 0.0), 4.0);
        assert_eq!(learned_param_denominator(0.0, 0.0), 0.0);
        let u = single_column(&[1.0, 2.0]);
        let d = channel_normalized_delta(&u, &[1.0], 1, &[0.0], 1.0, DEFAULT_STABILIZER).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert_eq!(d[0], -1.0 / DEFAULT_STABILIZER);
    }

    #[test]
    fn unit_denominators_reproduce_plain_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g = ConvGeometry::new(2, 3, 2, 1, 0);
        let x = Tensor4::from_vec([2, 2, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u = im2col_batch(&x, &g).unwrap();
        let err: Vec<f64> = (0..3 * u.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = channel_normalized_delta(&u, &err, 3, &[1.0, 1.0], 0.5, 1e-8).unwrap();
        for o in 0..3 {
            for r in 0..u.rows() {
                let grad: f64 = (0..u.cols()).map(|c| err[o * u.cols() + c] * u.get(r, c)).sum();
                assert!((d[o * u.rows() + r] + 0.5 * grad).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_step_meets_constraint_and_sgd_does_not() {
        let w = [0.3, -0.2, 0.5];
        let x = [1.0, 2.0, -1.5];
        let d = 2.0;
        let step = nlms_scalar_step(&w, &x, d, 1.0);
        assert!(pmd_audit_scalar(&w, &x, d, &step).residual.abs() <= 1e-10);
        let y: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let sgd: Vec<f64> = w.iter().zip(&x).map(|(a, b)| a + (d - y) * b).collect();
        assert!(pmd_audit_scalar(&w, &x, d, &sgd).residual.abs() > 1e-3);
    }

    #[test]
    fn ledger_residuals_vanish_for_exact_single_pixel_step() {
        let x = [1.0, -2.0, 0.5];
        let u = single_column(&x);
        let w = vec![0.1, 0.2, 0.3];
        let y: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        let delta = 0.4;
        let cfg = NlmsConfig { norm_kind: NormKind::L2, stabilizer: f64::MIN_POSITIVE, mu: 1.0 };
        let mut after = w.clone();
        nlms_conv_update(&mut after, &u, &[delta], 1, &cfg).unwrap();
        let mut ledger = PmdLedger::default();
        ledger.record(0, 0, &w, &after, &u, &[y], &[delta]);
        assert!(ledger.entries[0].residuals[0].abs() < 1e-12);
    }

    #[test]
    fn noise_edge_cases_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut e = vec![1.0, 2.0, 3.0];
        inject_noise(&mut e, 0.0, &mut rng);
        assert_eq!(e, vec![1.0, 2.0, 3.0]);
        let mut z = vec![0.0; 10];
        inject_noise(&mut z, 5.0, &mut rng);
        assert!(z.iter().all(|&v| v == 0.0));

        let orig: Vec<f64> = (0..100_000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var_e = 3.0;
        let mut noisy = orig.clone();
        inject_noise(&mut noisy, 1.0, &mut rng);
        let diff: Vec<f64> = noisy.iter().zip(&orig).map(|(a, b)| a - b).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diff.len() as f64;
        assert!((var / var_e - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn noise_stream_is_deterministic() {
        let cfg = NoiseConfig { alpha: 1.0, seed: 99, target_layer: 0, propagate_upstream: true };
        let base: Vec<f64> = (0..50).map(|i| (i as f64).cos()).collect();
        let mut a = base.clone();
        let mut b = base.clone();
        NoiseInjector::new(cfg).inject(&mut a);
        NoiseInjector::new(cfg).inject(&mut b);
        assert_eq!(a, b);
        assert_ne!(a, base);
    }
}
