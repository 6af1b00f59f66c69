//! Natural modes of the weight-error recursion.
//!
//! With input autocorrelation `R = QΛQᵀ` and step size `μ`, gradient descent
//! on the quadratic error surface gives `C(n+1) = (I − μR)·C(n)` for the
//! weight error `C = W − W_o`. In the eigenbasis `v = QᵀC` every mode evolves
//! on its own: `v_k(n) = (1 − μλ_k)^n·v_k(0)`. All modes shrink iff
//! `μ < 2/λ_max`, and mode `k` decays by `e` every `τ_k = −1/ln(1 − μλ_k)` steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{autocorrelation, block_energy_ratio, sym_eig, EigenDecomposition, SymMatrix};
use crate::tensor::{channel_moments, UnrolledInput};

/// Eigenvalues below this fraction of `λ_max` are treated as exactly zero.
pub const ZERO_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModeClass {
    /// `0 < μλ < 1`: monotone geometric decay.
    Decaying,
    /// `1 ≤ μλ < 2`: decays while alternating sign.
    Oscillatory,
    /// `μλ ≥ 2`: grows without bound.
    Divergent,
    /// Clamped zero eigenvalue: the mode never moves.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub lambda: f64,
    pub class: ModeClass,
    /// Finite only for decaying modes; infinite for frozen ones.
    pub tau: Option<f64>,
}

/// `−1/ln(1 − μλ)`.
pub fn time_constant(mu_lambda: f64) -> f64 {
    -1.0 / (1.0 - mu_lambda).ln()
}

pub fn classify(lambda: f64, lambda_max: f64, mu: f64) -> Mode {
    if lambda.abs() <= ZERO_CLAMP * lambda_max.abs() || lambda_max <= 0.0 {
        return Mode { lambda: 0.0, class: ModeClass::Frozen, tau: Some(f64::INFINITY) };
    }
    let x = mu * lambda;
    let (class, tau) = if x <= 0.0 {
        (ModeClass::Frozen, Some(f64::INFINITY))
    } else if x < 1.0 {
        (ModeClass::Decaying, Some(time_constant(x)))
    } else if x < 2.0 {
        (ModeClass::Oscillatory, None)
    } else {
        (ModeClass::Divergent, None)
    };
    Mode { lambda, class, tau }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalReport {
    pub layer: usize,
    pub mu: f64,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `2/λ_max`; infinite when `R` is zero.
    pub mu_max: f64,
    /// Largest time constant among non-oscillating modes (set by `λ_min`).
    /// `NaN` when every mode oscillates or diverges.
    pub tau_max: f64,
    pub modes: Vec<Mode>,
    /// Share of `‖R‖²_F` in the per-channel diagonal blocks.
    pub block_energy_ratio: f64,
    /// Population variance of each input channel block.
    pub channel_variances: Vec<f64>,
}

impl ModalReport {
    /// True when every mode decays (possibly while oscillating).
    pub fn is_stable(&self) -> bool {
        self.modes.iter().all(|m| m.class != ModeClass::Divergent)
    }

    pub fn from_eigenvalues(layer: usize, mu: f64, eigenvalues: Vec<f64>, block_energy_ratio: f64, channel_variances: Vec<f64>) -> Self {
        let lambda_max = eigenvalues.last().copied().unwrap_or(0.0);
        let clamp = |l: f64| if l.abs() <= ZERO_CLAMP * lambda_max.abs() { 0.0 } else { l };
        let lambda_min = eigenvalues.first().copied().map(clamp).unwrap_or(0.0);
        let modes: Vec<Mode> = eigenvalues.iter().map(|&l| classify(l, lambda_max, mu)).collect();
        let tau_max = modes.iter().filter_map(|m| m.tau).fold(f64::NAN, f64::max);
        let mu_max = if lambda_max > 0.0 { 2.0 / lambda_max } else { f64::INFINITY };
        ModalReport { layer, mu, eigenvalues, lambda_min, lambda_max, mu_max, tau_max, modes, block_energy_ratio, channel_variances }
    }
}

/// Natural-mode report for the unrolled input of one conv layer.
pub fn analyze_layer(unrolled: &UnrolledInput, mu: f64, layer: usize) -> Result<ModalReport> {
    let r = autocorrelation(unrolled)?;
    let eig = sym_eig(&r)?;
    let blocks: Vec<_> = unrolled.channel_blocks().into_iter().map(|b| b.rows).collect();
    let ratio = block_energy_ratio(&r, &blocks)?;
    let variances = channel_moments(unrolled)?.iter().map(|m| m.var).collect();
    Ok(ModalReport::from_eigenvalues(layer, mu, eig.eigenvalues, ratio, variances))
}

/// Solves the Wiener-Hopf equations `R·W_o = P`.
pub fn wiener_solve(r: &SymMatrix, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != r.order() {
        return Err(Error::Shape(format!("P has {} entries for a {}x{} R", p.len(), r.order(), r.order())));
    }
    let singular = || -> Error {
        let min_eigenvalue = sym_eig(r).map(|e| e.lambda_min()).unwrap_or(f64::NAN);
        Error::Singular { min_eigenvalue }
    };
    let scale = r.max_abs();
    let mut w = r.cholesky_solve(p).ok_or_else(singular)?;
    // one round of iterative refinement tightens the residual on ill-conditioned R
    let resid: Vec<f64> = p.iter().zip(r.mul_vec(&w)).map(|(a, b)| a - b).collect();
    if let Some(dw) = r.cholesky_solve(&resid) {
        w.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
    }
    if w.iter().any(|v| !v.is_finite()) || scale == 0.0 {
        return Err(singular());
    }
    Ok(w)
}

/// Predicted and measured evolution of one natural mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrajectory {
    pub mode: usize,
    pub lambda: f64,
    /// `(1 − μλ_k)^n·v_k(0)`.
    pub predicted: Vec<f64>,
    /// `(Qᵀ(W(n) − W_o))_k`.
    pub measured: Vec<f64>,
}

/// Projects a weight history onto the eigenbasis and pairs each mode with
/// its closed-form prediction.
pub fn mode_trajectories(history: &[Vec<f64>], w_o: &[f64], eig: &EigenDecomposition, mu: f64) -> Result<Vec<ModeTrajectory>> {
    let n = eig.order();
    if w_o.len() != n || history.iter().any(|w| w.len() != n) {
        return Err(Error::Shape(format!("weight vectors must have length {n}")));
    }
    if history.is_empty() {
        return Err(Error::Invalid("empty weight history".into()));
    }
    let projected: Vec<Vec<f64>> = history
        .iter()
        .map(|w| {
            let c: Vec<f64> = w.iter().zip(w_o).map(|(a, b)| a - b).collect();
            eig.project(&c)
        })
        .collect();
    Ok((0..n)
        .map(|k| {
            let lambda = eig.eigenvalues[k];
            let v0 = projected[0][k];
            let factor = 1.0 - mu * lambda;
            let predicted = (0..history.len()).map(|step| v0 * factor.powi(step as i32)).collect();
            let measured = projected.iter().map(|v| v[k]).collect();
            ModeTrajectory { mode: k, lambda, predicted, measured }
        })
        .collect())
}

/// Quadratic error surface `J(W) = ½WᵀRW − PᵀW + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub r: SymMatrix,
    pub p: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(r: SymMatrix, p: Vec<f64>) -> Result<Self> {
        if p.len() != r.order() {
            return Err(Error::Shape(format!("P has {} entries for order {}", p.len(), r.order())));
        }
        Ok(QuadraticProblem { r, p })
    }

    /// Sample moments `R = UUᵀ/N`, `P = U·d/N` of a linear-regression data set.
    pub fn from_samples(u: &UnrolledInput, desired: &[f64]) -> Result<Self> {
        let (k, n) = (u.rows(), u.cols());
        if desired.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} targets for {n} columns", desired.len())));
        }
        let mut r = vec![0.0; k * k];
        crate::gemm::matmul_bt(k, n, k, 1.0 / n as f64, u.data(), u.data(), 0.0, &mut r);
        let p = (0..k).map(|i| u.row(i).iter().zip(desired).map(|(x, d)| x * d).sum::<f64>() / n as f64).collect();
        QuadraticProblem::new(SymMatrix::from_rows(k, r)?, p)
    }

    pub fn order(&self) -> usize {
        self.r.order()
    }

    /// `RW − P`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        self.r.mul_vec(w).iter().zip(&self.p).map(|(a, b)| a - b).collect()
    }

    /// Deterministic full-gradient descent from `w0`, returning `W(0..=steps)`.
    pub fn descend(&self, w0: &[f64], mu: f64, steps: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut w = w0.to_vec();
        out.push(w.clone());
        for _ in 0..steps {
            let g = self.gradient(&w);
            w.iter_mut().zip(g).for_each(|(w, g)| *w -= mu * g);
            out.push(w.clone());
        }
        out
    }
}

/// Random symmetric positive definite matrix with eigenvalues log-spaced
/// between `lambda_max/kappa` and `lambda_max`, in a random orthonormal basis.
pub fn random_spd(n: usize, kappa: f64, lambda_max: f64, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let lambdas: Vec<f64> = (0..n)
        .map(|k| {
            let t = if n == 1 { 1.0 } else { k as f64 / (n - 1) as f64 };
            lambda_max * kappa.powf(t - 1.0)
        })
        .collect();
    let mut a = vec![0.0; n * n];
    for (k, u) in q.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] += lambdas[k] * u[i] * u[j];
            }
        }
    }
    SymMatrix::from_rows(n, a).expect("finite by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Converged,
    /// First step at which the weight-error norm exceeded its initial value
    /// by the divergence factor.
    Diverged { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mu: f64,
    pub outcome: ProbeOutcome,
}

const DIVERGENCE_FACTOR: f64 = 1e6;

/// Runs the deterministic recursion from a start that excites every mode
/// equally and classifies each step size by the weight-error trend: diverged
/// once `‖C(n)‖` exceeds `10⁶·‖C(0)‖`, or if `‖C(N)‖ > ‖C(0)‖` at the end.
pub fn stability_probe(problem: &QuadraticProblem, mus: &[f64], steps: usize) -> Result<Vec<ProbeResult>> {
    let w_o = wiener_solve(&problem.r, &problem.p)?;
    let eig = sym_eig(&problem.r)?;
    let n = problem.order();
    // C(0) = Q·1: unit weight on every mode
    let c0: Vec<f64> = (0..n).map(|i| (0..n).map(|k| eig.eigenvectors[i * n + k]).sum()).collect();
    let norm0 = c0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let start: Vec<f64> = w_o.iter().zip(&c0).map(|(a, b)| a + b).collect();
    Ok(mus
        .iter()
        .map(|&mu| {
            let mut w = start.clone();
            let mut outcome = ProbeOutcome::Converged;
            for step in 1..=steps {
                let g = problem.gradient(&w);
                w.iter_mut().zip(g).for_each(|(a, b)| *a -= mu * b);
                let norm = w.iter().zip(&w_o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if !(norm <= DIVERGENCE_FACTOR * norm0) {
                    outcome = ProbeOutcome::Diverged { step };
                    break;
                }
                if step == steps && norm > norm0 {
                    outcome = ProbeOutcome::Diverged { step };
                }
            }
            ProbeResult { mu, outcome }
        })
        .collect())
}

/// Bisects on `μ` in `[lo, hi]` for the divergence threshold of the
/// deterministic recursion. Requires `lo` to converge and `hi` to diverge.
pub fn stability_boundary(problem: &QuadraticProblem, lo: f64, hi: f64, steps: usize, iterations: usize) -> Result<f64> {
    let diverges = |mu: f64| -> Result<bool> {
        Ok(matches!(stability_probe(problem, &[mu], steps)?[0].outcome, ProbeOutcome::Diverged { .. }))
    };
    let (mut lo, mut hi) = (lo, hi);
    if diverges(lo)? || !diverges(hi)? {
        return Err(Error::Invalid(format!("[{lo}, {hi}] does not bracket the stability boundary")));
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if diverges(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Least-squares slope of `−ln|v(n)|` against `n`: the per-step decay rate
/// of a geometric series. Entries that are exactly zero are skipped.
pub fn fit_decay_rate(series: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = series.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(n, v)| (n as f64, v.abs().ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Some(-sxy / sxx)
}
