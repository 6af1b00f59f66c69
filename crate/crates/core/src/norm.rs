//! Batch normalization and its thresholded variants.
//!
//! `Amplify` normalizes only weak channels (batch variance below the power
//! threshold), lifting them to unit power. `Suppress` normalizes only strong
//! channels (variance above the threshold), pulling them down to unit power.
//! Channels left out of the mask pass through untouched: no mean shift, no
//! scaling, no affine transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormVariant {
    Standard,
    Amplify,
    Suppress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    AfterConv,
    BeforeConv,
}

/// How the threshold selects channels for the two variants.
///
/// `ByName` normalizes weak channels for `Amplify` and strong channels for
/// `Suppress`. `Inverted` swaps the comparisons and exists for comparison
/// runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdRule {
    #[default]
    ByName,
    Inverted,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Which channels get normalized for a given set of per-channel variances.
///
/// Comparisons are strict: a channel sitting exactly on the threshold is
/// never selected by either variant.
pub fn variant_mask(var: &[f64], variant: NormVariant, threshold: f64, rule: ThresholdRule) -> Vec<bool> {
    let weak = |v: f64| v < threshold;
    let strong = |v: f64| v > threshold;
    var.iter()
        .map(|&v| match (variant, rule) {
            (NormVariant::Standard, _) => true,
            (NormVariant::Amplify, ThresholdRule::ByName) | (NormVariant::Suppress, ThresholdRule::Inverted) => weak(v),
            (NormVariant::Suppress, ThresholdRule::ByName) | (NormVariant::Amplify, ThresholdRule::Inverted) => strong(v),
        })
        .collect()
}

/// Parameters and running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormState {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub variant: NormVariant,
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub placement: Placement,
    /// Training forward passes taken; running statistics are valid once this is non-zero.
    pub updates: u64,
}

impl NormState {
    pub fn new(channels: usize, variant: NormVariant, placement: Placement) -> Self {
        NormState {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            variant,
            threshold: DEFAULT_THRESHOLD,
            rule: ThresholdRule::ByName,
            placement,
            updates: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if [self.gamma.len(), self.beta.len(), self.running_mean.len(), self.running_var.len()].iter().any(|&l| l != c) {
            return Err(Error::Shape(format!("norm state vectors must all have length {c}")));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("running variance must be non-negative".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Invalid(format!("momentum {} outside (0, 1]", self.momentum)));
        }
        if self.variant != NormVariant::Standard && !(self.threshold > 0.0) {
            return Err(Error::Invalid(format!("threshold {} must be positive", self.threshold)));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "norm layer has {} channels, input has {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass using batch statistics.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, NormCache)> {
        self.check_input(x)?;
        let [b, c, h, w] = x.dims();
        let plane = h * w;
        let count = b * plane;
        if count == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let chunks = (0..b).map(|s| &x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane]);
            let sum: f64 = chunks.clone().flatten().sum();
            let mu = sum / count as f64;
            let ss: f64 = chunks.flatten().map(|v| (v - mu) * (v - mu)).sum();
            mean[ch] = mu;
            var[ch] = ss / count as f64;
        }
        let mask = variant_mask(&var, self.variant, self.threshold, self.rule);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut y = x.clone();
        let mut xhat = vec![0.0; x.data().len()];
        for s in 0..b {
            for ch in 0..c {
                if !mask[ch] {
                    continue;
                }
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    let n = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = n;
                    y.data_mut()[i] = self.gamma[ch] * n + self.beta[ch];
                }
            }
        }

        let m = self.momentum;
        for ch in 0..c {
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean[ch];
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * var[ch];
        }
        self.updates += 1;

        let cache = NormCache { dims: x.dims(), mean, var, inv_std, normalized: xhat, mask, generation: self.updates };
        Ok((y, cache))
    }

    /// Inference-mode forward pass using running statistics.
    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        if self.updates == 0 {
            return Err(Error::UninitializedRunningStats);
        }
        let [b, c, h, w] = x.dims();
        let plane = h * w;
        let mask = variant_mask(&self.running_var, self.variant, self.threshold, self.rule);
        let mut y = x.clone();
        for s in 0..b {
            for ch in 0..c {
                if !mask[ch] {
                    continue;
                }
                let inv_std = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                let off = (s * c + ch) * plane;
                for v in &mut y.data_mut()[off..off + plane] {
                    *v = self.gamma[ch] * (*v - self.running_mean[ch]) * inv_std + self.beta[ch];
                }
            }
        }
        Ok(y)
    }

    /// Exact gradient of [`forward_train`](Self::forward_train), including
    /// the paths through the batch mean and variance.
    pub fn backward(&self, grad_y: &Tensor4, cache: &NormCache) -> Result<NormGrads> {
        if cache.generation != self.updates {
            return Err(Error::StaleCache { cache: cache.generation, params: self.updates });
        }
        if grad_y.dims() != cache.dims {
            return Err(Error::Shape(format!("gradient dims {:?} differ from cached {:?}", grad_y.dims(), cache.dims)));
        }
        let [b, c, h, w] = cache.dims;
        let plane = h * w;
        let count = (b * plane) as f64;
        let gy = grad_y.data();
        let mut grad_x = grad_y.clone();
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ch in 0..c {
            if !cache.mask[ch] {
                continue;
            }
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for s in 0..b {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    sum_g += gy[i];
                    sum_gx += gy[i] * cache.normalized[i];
                }
            }
            grad_beta[ch] = sum_g;
            grad_gamma[ch] = sum_gx;
            let scale = self.gamma[ch] * cache.inv_std[ch] / count;
            for s in 0..b {
                let off = (s * c + ch) * plane;
                for i in off..off + plane {
                    grad_x.data_mut()[i] = scale * (count * gy[i] - sum_g - cache.normalized[i] * sum_gx);
                }
            }
        }
        Ok(NormGrads { grad_x, grad_gamma, grad_beta })
    }
}

/// Batch statistics retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub dims: [usize; 4],
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `u*`: the normalized input, zero on unmasked channels.
    pub normalized: Vec<f64>,
    pub mask: Vec<bool>,
    generation: u64,
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub grad_x: Tensor4,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel_var(t: &Tensor4, ch: usize) -> (f64, f64) {
        let [b, c, h, w] = t.dims();
        let vals: Vec<f64> = (0..b).flat_map(|s| t.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    fn scaled_input(rng: &mut ChaCha8Rng, scales: &[f64], b: usize, hw: usize) -> Tensor4 {
        let c = scales.len();
        let mut data = vec![0.0; b * c * hw];
        for s in 0..b {
            for ch in 0..c {
                for i in 0..hw {
                    data[(s * c + ch) * hw + i] = scales[ch] * rng.random_range(-1.0..1.0) + 0.3 * ch as f64;
                }
            }
        }
        Tensor4::from_vec([b, c, 1, hw], data).unwrap()
    }

    #[test]
    fn mask_examples() {
        let r = ThresholdRule::ByName;
        assert_eq!(variant_mask(&[0.25, 4.0], NormVariant::Amplify, 1.0, r), vec![true, false]);
        assert_eq!(variant_mask(&[0.25, 4.0], NormVariant::Suppress, 1.0, r), vec![false, true]);
        assert_eq!(variant_mask(&[1.0, 1.0], NormVariant::Amplify, 1.0, r), vec![false, false]);
        assert_eq!(variant_mask(&[1.0, 1.0], NormVariant::Suppress, 1.0, r), vec![false, false]);
        assert_eq!(variant_mask(&[0.25, 4.0], NormVariant::Standard, 1.0, r), vec![true, true]);
        let inv = ThresholdRule::Inverted;
        assert_eq!(variant_mask(&[0.25, 4.0], NormVariant::Amplify, 1.0, inv), vec![false, true]);
        assert_eq!(variant_mask(&[0.25, 4.0], NormVariant::Suppress, 1.0, inv), vec![true, false]);
    }

    #[test]
    fn standard_forward_examples() {
        let mut st = NormState::new(1, NormVariant::Standard, Placement::AfterConv);
        st.eps = 0.0;
        let x = Tensor4::from_vec([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, _) = st.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let mut st = NormState::new(1, NormVariant::Standard, Placement::AfterConv);
        st.eps = 0.0;
        st.gamma = vec![2.0];
        st.beta = vec![5.0];
        let x = Tensor4::from_vec([4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = st.forward_train(&x).unwrap();
        let (m, v) = channel_var(&y, 0);
        assert!((m - 5.0).abs() < 1e-12 && (v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn amplify_lifts_only_weak_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // uniform(-1,1) has variance 1/3; scales give 0.01 and 9.0
        let x = scaled_input(&mut rng, &[0.1 * 3f64.sqrt(), 3.0 * 3f64.sqrt()], 8, 50);
        let (_, v1) = channel_var(&x, 1);
        let mut st = NormState::new(2, NormVariant::Amplify, Placement::AfterConv);
        st.eps = 0.0;
        let (y, cache) = st.forward_train(&x).unwrap();
        assert_eq!(cache.mask, vec![true, false]);
        assert!((channel_var(&y, 0).1 - 1.0).abs() < 1e-10);
        assert!((channel_var(&y, 1).1 - v1).abs() < 1e-10);
        assert_eq!(y.data()[50..100], x.data()[50..100]);
    }

    #[test]
    fn eval_matches_train_when_running_stats_are_last_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = scaled_input(&mut rng, &[0.2, 1.0, 3.0], 4, 9);
        for variant in [NormVariant::Standard, NormVariant::Amplify, NormVariant::Suppress] {
            let mut st = NormState::new(3, variant, Placement::AfterConv);
            st.momentum = 1.0;
            st.gamma = vec![1.5, 0.5, 2.0];
            st.beta = vec![0.1, -0.2, 0.3];
            let (y_train, _) = st.forward_train(&x).unwrap();
            let y_eval = st.forward_eval(&x).unwrap();
            for (a, b) in y_train.data().iter().zip(y_eval.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_identity_and_suppress_selection() {
        let mut st = NormState::new(2, NormVariant::Standard, Placement::AfterConv);
        let x = Tensor4::from_vec([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(st.forward_eval(&x), Err(Error::UninitializedRunningStats)));
        st.updates = 1;
        st.eps = 0.0;
        assert_eq!(st.forward_eval(&x).unwrap(), x);

        let mut st = NormState::new(2, NormVariant::Suppress, Placement::AfterConv);
        st.updates = 1;
        st.eps = 0.0;
        st.running_var = vec![0.5, 2.0];
        st.running_mean = vec![0.0, 1.0];
        let y = st.forward_eval(&x).unwrap();
        assert_eq!(&y.data()[..2], &x.data()[..2]);
        assert!((y.data()[2] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((y.data()[3] - 2.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backward_pass_through_and_mean_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = scaled_input(&mut rng, &[0.2, 3.0], 3, 6);
        let mut st = NormState::new(2, NormVariant::Amplify, Placement::AfterConv);
        let (_, cache) = st.forward_train(&x).unwrap();
        let gy = Tensor4::from_vec(x.dims(), vec![0.7; x.data().len()]).unwrap();
        let g = st.backward(&gy, &cache).unwrap();
        let [_, c, h, w] = x.dims();
        for s in 0..3 {
            let off0 = (s * c) * h * w;
            let off1 = (s * c + 1) * h * w;
            assert!(g.grad_x.data()[off0..off0 + h * w].iter().all(|v| v.abs() < 1e-12));
            assert_eq!(&g.grad_x.data()[off1..off1 + h * w], &gy.data()[off1..off1 + h * w]);
        }
        assert_eq!((g.grad_gamma[1], g.grad_beta[1]), (0.0, 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = scaled_input(&mut rng, &[1.0], 2, 4);
        let mut st = NormState::new(1, NormVariant::Standard, Placement::AfterConv);
        let (_, cache) = st.forward_train(&x).unwrap();
        st.forward_train(&x).unwrap();
        assert!(matches!(st.backward(&x, &cache), Err(Error::StaleCache { .. })));
    }

    /// Central differences on L = Σ r·y for a fixed random r.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for variant in [NormVariant::Standard, NormVariant::Amplify, NormVariant::Suppress] {
            let x = scaled_input(&mut rng, &[0.3, 3.0, 0.9], 3, 5);
            let r: Vec<f64> = (0..x.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut st = NormState::new(3, variant, Placement::AfterConv);
            st.gamma = vec![1.3, 0.7, 1.1];
            st.beta = vec![0.2, -0.4, 0.0];
            let loss = |st: &NormState, x: &Tensor4| {
                let mut s = st.clone();
                let (y, _) = s.forward_train(x).unwrap();
                y.data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut probe = st.clone();
            let (_, cache) = probe.forward_train(&x).unwrap();
            let grads = probe.backward(&Tensor4::from_vec(x.dims(), r.clone()).unwrap(), &cache).unwrap();
            let h = 1e-5;
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&st, &xp) - loss(&st, &xm)) / (2.0 * h);
                let an = grads.grad_x.data()[i];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "{variant:?} x[{i}] {fd} vs {an}");
            }
            for ch in 0..3 {
                for (which, an) in [(0, grads.grad_gamma[ch]), (1, grads.grad_beta[ch])] {
                    let mut sp = st.clone();
                    let mut sm = st.clone();
                    if which == 0 {
                        sp.gamma[ch] += h;
                        sm.gamma[ch] -= h;
                    } else {
                        sp.beta[ch] += h;
                        sm.beta[ch] -= h;
                    }
                    let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
                    assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3), "{variant:?} param {which} ch {ch}");
                }
            }
        }
    }
}
