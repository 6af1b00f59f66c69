//! Parameter updates, the training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{backward_with_noise, forward, predict, BackwardRecord, ForwardCache, LayerGrads};
use super::graph::LayerGraph;
use super::params::{LayerParams, ParamSet};
use crate::data::{Dataset, Outcome};
use crate::error::{Error, Result};
use crate::nlms::{nlms_conv_delta, NlmsConfig, NoiseConfig, NoiseInjector, NormKind};

/// Learning rates per parameter group and per-layer update rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdatePlan {
    /// Step size for conv weights.
    pub mu_conv: f64,
    /// Step size for everything else: conv and FC biases, FC weights, γ and β.
    pub mu_other: f64,
    /// Leaves FC weights and biases at their initial values.
    pub freeze_fc: bool,
    /// Conv layers whose weights take the NLMS step instead of plain SGD.
    pub nlms: Vec<(usize, NormKind)>,
}

impl UpdatePlan {
    pub fn sgd(mu_conv: f64, mu_other: f64) -> Self {
        UpdatePlan { mu_conv, mu_other, freeze_fc: false, nlms: Vec::new() }
    }

    fn nlms_kind(&self, layer: usize) -> Option<NormKind> {
        self.nlms.iter().find(|(l, _)| *l == layer).map(|(_, k)| *k)
    }
}

fn descend(w: &mut [f64], g: &[f64], mu: f64) {
    w.iter_mut().zip(g).for_each(|(w, g)| *w -= mu * g);
}

/// `w ← w − μ_group·g` for every parameter, skipping conv weights listed
/// for NLMS and FC parameters when frozen.
pub fn sgd_step(params: &mut ParamSet, record: &BackwardRecord, plan: &UpdatePlan) -> Result<()> {
    if record.grads.len() != params.layers.len() {
        return Err(Error::Shape(format!("{} gradient layers for {} parameter layers", record.grads.len(), params.layers.len())));
    }
    for (i, (p, g)) in params.layers.iter_mut().zip(&record.grads).enumerate() {
        match (p, g) {
            (LayerParams::Conv { weight, bias }, LayerGrads::Conv { weight: gw, bias: gb }) => {
                if plan.nlms_kind(i).is_none() {
                    descend(weight, gw, plan.mu_conv);
                }
                if let (Some(b), Some(gb)) = (bias.as_mut(), gb) {
                    descend(b, gb, plan.mu_other);
                }
            }
            (LayerParams::Fc { weight, bias }, LayerGrads::Fc { weight: gw, bias: gb }) => {
                if !plan.freeze_fc {
                    descend(weight, gw, plan.mu_other);
                    descend(bias, gb, plan.mu_other);
                }
            }
            (LayerParams::Norm(s), LayerGrads::Norm { gamma, beta }) => {
                descend(&mut s.gamma, gamma, plan.mu_other);
                descend(&mut s.beta, beta, plan.mu_other);
            }
            (LayerParams::Stateless, LayerGrads::None) => {}
            _ => return Err(Error::Shape(format!("gradient of layer {i} does not match its parameters"))),
        }
    }
    params.touch();
    Ok(())
}

/// Full update: NLMS steps for the listed conv layers, SGD for the rest.
pub fn apply_update(params: &mut ParamSet, cache: &ForwardCache, record: &BackwardRecord, plan: &UpdatePlan) -> Result<()> {
    let batch = cache.batch() as f64;
    let mut nlms_deltas = Vec::new();
    for &(layer, kind) in &plan.nlms {
        let (Some(u), Some(Some(e))) = (cache.unrolled(layer), record.local_errors.get(layer)) else {
            return Err(Error::Invalid(format!("NLMS target {layer} is not a conv layer")));
        };
        // the engine's error carries the 1/B of the batch-mean loss; NLMS wants per-sample errors
        let per_sample: Vec<f64> = e.iter().map(|v| v * batch).collect();
        let cfg = NlmsConfig::new(kind, plan.mu_conv);
        let oc = e.len() / u.cols();
        nlms_deltas.push((layer, nlms_conv_delta(u, &per_sample, oc, &cfg)?));
    }
    sgd_step(params, record, plan)?;
    for (layer, delta) in nlms_deltas {
        let w = params.conv_weight_mut(layer).expect("checked above");
        w.iter_mut().zip(&delta).for_each(|(w, d)| *w += d);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub plan: UpdatePlan,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
    pub noise: Option<NoiseConfig>,
    pub eval_batch: usize,
    /// A batch loss above this marks the run unstable. Dead-ReLU blowups
    /// stay finite, so non-finite values alone miss most divergences.
    pub divergence_loss: f64,
}

impl TrainConfig {
    pub fn new(epochs: u32, batch_size: usize, plan: UpdatePlan, shuffle_seed: u64) -> Self {
        TrainConfig { epochs, batch_size, plan, shuffle_seed, noise: None, eval_batch: 500, divergence_loss: f64::INFINITY }
    }
}

/// Reported to the observer after every completed update.
pub struct StepEvent<'a> {
    pub epoch: u32,
    /// Number of updates taken so far, starting at 1.
    pub step: u64,
    /// Loss of the batch the update was computed on.
    pub loss: f64,
    pub params: &'a ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub epoch: u32,
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
    /// Validation error after each completed epoch.
    pub val_errors: Vec<(u32, f64)>,
    pub outcome: Outcome,
}

impl TrainLog {
    fn new() -> Self {
        TrainLog { steps: Vec::new(), val_errors: Vec::new(), outcome: Outcome::Completed }
    }
}

/// Drives SGD over a dataset. Deterministic given the initial parameters
/// and the config seeds.
pub struct Trainer<'g> {
    graph: &'g LayerGraph,
    pub params: ParamSet,
    config: TrainConfig,
    rng: ChaCha8Rng,
    noise: Option<NoiseInjector>,
    step: u64,
    epoch: u32,
}

fn as_unstable<T>(r: Result<T>, step: u64) -> Result<std::result::Result<T, Outcome>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Error::NonFinite { .. }) => Ok(Err(Outcome::Unstable { step })),
        Err(e) => Err(e),
    }
}

impl<'g> Trainer<'g> {
    pub fn new(graph: &'g LayerGraph, params: ParamSet, config: TrainConfig) -> Result<Self> {
        params.validate(graph)?;
        if config.batch_size == 0 || config.eval_batch == 0 {
            return Err(Error::Invalid("batch sizes must be positive".into()));
        }
        let noise = config.noise.map(NoiseInjector::new);
        Ok(Trainer { graph, params, rng: ChaCha8Rng::seed_from_u64(config.shuffle_seed), noise, config, step: 0, epoch: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One forward/backward/update on the given batch.
    pub fn step_on(&mut self, x: &crate::tensor::Tensor4, labels: &[usize]) -> Result<f64> {
        let (loss, cache) = forward(self.graph, &mut self.params, x, labels)?;
        let record = backward_with_noise(self.graph, &self.params, &cache, self.noise.as_mut())?;
        apply_update(&mut self.params, &cache, &record, &self.config.plan)?;
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `train` in a freshly shuffled order. Divergence ends the
    /// epoch early with an unstable outcome rather than an error.
    pub fn train_epoch(&mut self, train: &Dataset, log: &mut TrainLog, observer: &mut dyn FnMut(&StepEvent) -> Result<()>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = train.batch(chunk);
            let loss = match as_unstable(self.step_on(&x, &labels), self.step + 1)? {
                Ok(l) => l,
                Err(outcome) => {
                    log.outcome = outcome;
                    return Ok(());
                }
            };
            if loss > self.config.divergence_loss {
                log.outcome = Outcome::Unstable { step: self.step };
                return Ok(());
            }
            log.steps.push(StepLoss { epoch: self.epoch, step: self.step, loss });
            observer(&StepEvent { epoch: self.epoch, step: self.step, loss, params: &self.params })?;
        }
        Ok(())
    }

    /// Trains for the configured number of epochs, evaluating on `val`
    /// after each one.
    pub fn run(&mut self, train: &Dataset, val: &Dataset, observer: &mut dyn FnMut(&StepEvent) -> Result<()>) -> Result<TrainLog> {
        let mut log = TrainLog::new();
        for _ in 0..self.config.epochs {
            self.train_epoch(train, &mut log, observer)?;
            if log.outcome != Outcome::Completed {
                break;
            }
            match as_unstable(evaluate(self.graph, &self.params, val, self.config.eval_batch), self.step)? {
                Ok(err) => log.val_errors.push((self.epoch, err)),
                Err(outcome) => {
                    log.outcome = outcome;
                    break;
                }
            }
        }
        Ok(log)
    }
}

/// Fraction of misclassified samples, with norm layers in inference mode.
pub fn evaluate(graph: &LayerGraph, params: &ParamSet, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut wrong = 0usize;
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        let logits = predict(graph, params, &x)?;
        for (row, &label) in logits.chunks_exact(graph.classes).zip(&labels) {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            wrong += usize::from(best != label);
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}
