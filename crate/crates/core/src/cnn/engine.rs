//! Forward and backward passes.
//!
//! A conv layer computes `Y = W·U` with `U = im2col(X)`, so its weight
//! gradient is `E·Uᵀ`: row `o` is `Σ_col E[o,col]·U[:,col]`, the unrolled
//! input weighted by the local error `E = ∂J/∂Y` of output channel `o`.

use super::graph::{Layer, LayerGraph};
use super::params::{LayerParams, ParamSet};
use crate::error::{Error, Result};
use crate::gemm::{matmul, matmul_at, matmul_bt};
use crate::nlms::NoiseInjector;
use crate::norm::{NormCache, NormState};
use crate::tensor::{col2im, im2col_batch, ConvGeometry, Tensor4, UnrolledInput};

/// What a training forward pass keeps for the backward pass and for analysis.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv {
        /// `X^(l)` in unrolled form, `K × B·M`.
        unrolled: UnrolledInput,
        /// `Y^(l)` channel-major, `OC × B·M`.
        output: Vec<f64>,
    },
    Relu { active: Vec<bool> },
    AvgPool { in_dims: [usize; 4] },
    Fc { input: Vec<f64>, in_dims: [usize; 4] },
    Norm(NormCache),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    pub layers: Vec<LayerCache>,
    /// Input of every layer, kept only when requested.
    pub inputs: Option<Vec<Tensor4>>,
    /// `B × classes` softmax probabilities.
    pub probs: Vec<f64>,
    pub labels: Vec<usize>,
    pub loss: f64,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.labels.len()
    }

    pub fn unrolled(&self, layer: usize) -> Option<&UnrolledInput> {
        match self.layers.get(layer) {
            Some(LayerCache::Conv { unrolled, .. }) => Some(unrolled),
            _ => None,
        }
    }
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Conv { weight: Vec<f64>, bias: Option<Vec<f64>> },
    Fc { weight: Vec<f64>, bias: Vec<f64> },
    Norm { gamma: Vec<f64>, beta: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct BackwardRecord {
    pub grads: Vec<LayerGrads>,
    /// `E^(l) = ∂J/∂Y^(l)` for conv layers, channel-major `OC × B·M`.
    /// Includes the `1/B` of the batch-mean loss and any injected noise.
    pub local_errors: Vec<Option<Vec<f64>>>,
}

fn conv_forward(x: &Tensor4, g: &ConvGeometry, weight: &[f64], bias: Option<&[f64]>) -> Result<(Tensor4, UnrolledInput, Vec<f64>)> {
    let u = im2col_batch(x, g)?;
    let (oc, k, n) = (g.out_channels, u.rows(), u.cols());
    let mut ych = vec![0.0; oc * n];
    matmul(oc, k, n, 1.0, weight, u.data(), 0.0, &mut ych);
    if let Some(b) = bias {
        for (row, bo) in ych.chunks_exact_mut(n).zip(b) {
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    let lay = u.layout();
    let m = lay.cols_per_sample();
    let batch = x.batch();
    let mut y = vec![0.0; batch * oc * m];
    for o in 0..oc {
        for b in 0..batch {
            y[(b * oc + o) * m..(b * oc + o + 1) * m].copy_from_slice(&ych[o * n + b * m..o * n + (b + 1) * m]);
        }
    }
    Ok((Tensor4::from_vec_unchecked([batch, oc, lay.out_h, lay.out_w], y), u, ych))
}

fn avgpool_forward(x: &Tensor4, k: usize, s: usize) -> Tensor4 {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let scale = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros(b, c, oh, ow);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let row = &plane[(oy * s + ky) * w + ox * s..][..k];
                    acc += row.iter().sum::<f64>();
                }
                dst[(p * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    out
}

fn avgpool_backward(grad: &Tensor4, in_dims: [usize; 4], k: usize, s: usize) -> Tensor4 {
    let [b, c, h, w] = in_dims;
    let (oh, ow) = (grad.height(), grad.width());
    let scale = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros(b, c, h, w);
    let src = grad.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let plane = &mut dst[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[(p * oh + oy) * ow + ox] * scale;
                for ky in 0..k {
                    plane[(oy * s + ky) * w + ox * s..][..k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    out
}

fn fc_forward(x: &Tensor4, weight: &[f64], bias: &[f64], outputs: usize) -> Tensor4 {
    let b = x.batch();
    let inputs = x.sample_len();
    let mut y = vec![0.0; b * outputs];
    for row in y.chunks_exact_mut(outputs) {
        row.copy_from_slice(bias);
    }
    matmul_bt(b, inputs, outputs, 1.0, x.data(), weight, 1.0, &mut y);
    Tensor4::from_vec_unchecked([b, outputs, 1, 1], y)
}

/// Softmax probabilities and mean cross-entropy of `B × C` logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (Vec<f64>, f64) {
    let mut probs = logits.to_vec();
    let mut loss = 0.0;
    for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        row.iter_mut().for_each(|z| *z = (*z - log_z).exp());
    }
    (probs, loss / labels.len().max(1) as f64)
}

fn check_batch(graph: &LayerGraph, x: &Tensor4) -> Result<()> {
    let [_, c, h, w] = x.dims();
    if [c, h, w] != graph.input {
        return Err(Error::Shape(format!("batch samples are {c}x{h}x{w}, graph expects {:?}", graph.input)));
    }
    if x.batch() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(())
}

fn finite(t: Tensor4, layer: usize) -> Result<Tensor4> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Training-mode forward pass: norm layers use batch statistics and update
/// their running statistics. Fails with [`Error::NonFinite`] naming the
/// first layer whose output overflows.
pub fn forward(graph: &LayerGraph, params: &mut ParamSet, x: &Tensor4, labels: &[usize]) -> Result<(f64, ForwardCache)> {
    forward_impl(graph, params, x, labels, false)
}

/// Like [`forward`], additionally keeping every layer's input tensor.
pub fn forward_keep_inputs(graph: &LayerGraph, params: &mut ParamSet, x: &Tensor4, labels: &[usize]) -> Result<(f64, ForwardCache)> {
    forward_impl(graph, params, x, labels, true)
}

fn forward_impl(graph: &LayerGraph, params: &mut ParamSet, x: &Tensor4, labels: &[usize], keep: bool) -> Result<(f64, ForwardCache)> {
    check_batch(graph, x)?;
    if labels.len() != x.batch() {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), x.batch())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= graph.classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {} classes", graph.classes)));
    }
    let mut caches = Vec::with_capacity(graph.layers.len());
    let mut inputs = keep.then(Vec::new);
    let mut cur = x.clone();
    for (i, (layer, p)) in graph.layers.iter().zip(params.layers.iter_mut()).enumerate() {
        if let Some(v) = inputs.as_mut() {
            v.push(cur.clone());
        }
        let (next, cache) = match (layer, p) {
            (Layer::Conv(g), LayerParams::Conv { weight, bias }) => {
                let (y, unrolled, output) = conv_forward(&cur, g, weight, bias.as_deref())?;
                (y, LayerCache::Conv { unrolled, output })
            }
            (Layer::Relu, _) => {
                let active: Vec<bool> = cur.data().iter().map(|&v| v > 0.0).collect();
                cur.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                (cur, LayerCache::Relu { active })
            }
            (Layer::AvgPool { kernel, stride }, _) => (avgpool_forward(&cur, *kernel, *stride), LayerCache::AvgPool { in_dims: cur.dims() }),
            (Layer::FullyConnected { outputs, .. }, LayerParams::Fc { weight, bias }) => {
                let y = fc_forward(&cur, weight, bias, *outputs);
                let in_dims = cur.dims();
                (y, LayerCache::Fc { input: cur.into_vec(), in_dims })
            }
            (Layer::Norm(_), LayerParams::Norm(state)) => {
                let (y, c) = state.forward_train(&cur)?;
                (y, LayerCache::Norm(c))
            }
            _ => return Err(Error::Shape(format!("parameters of layer {i} do not match the graph"))),
        };
        cur = finite(next, i)?;
        caches.push(cache);
    }
    let (probs, loss) = softmax_cross_entropy(cur.data(), labels, graph.classes);
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: graph.layers.len() - 1 });
    }
    Ok((loss, ForwardCache { version: params.version(), layers: caches, inputs, probs, labels: labels.to_vec(), loss }))
}

/// Inference-mode logits (`B × classes`); norm layers use running statistics.
pub fn predict(graph: &LayerGraph, params: &ParamSet, x: &Tensor4) -> Result<Vec<f64>> {
    check_batch(graph, x)?;
    let mut cur = x.clone();
    for (i, (layer, p)) in graph.layers.iter().zip(&params.layers).enumerate() {
        let next = match (layer, p) {
            (Layer::Conv(g), LayerParams::Conv { weight, bias }) => conv_forward(&cur, g, weight, bias.as_deref())?.0,
            (Layer::Relu, _) => {
                cur.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                cur
            }
            (Layer::AvgPool { kernel, stride }, _) => avgpool_forward(&cur, *kernel, *stride),
            (Layer::FullyConnected { outputs, .. }, LayerParams::Fc { weight, bias }) => fc_forward(&cur, weight, bias, *outputs),
            (Layer::Norm(_), LayerParams::Norm(state)) => state.forward_eval(&cur)?,
            _ => return Err(Error::Shape(format!("parameters of layer {i} do not match the graph"))),
        };
        cur = finite(next, i)?;
    }
    Ok(cur.into_vec())
}

/// `(softmax − onehot)/B`, the error at the logits.
pub fn output_error(probs: &[f64], labels: &[usize], classes: usize) -> Vec<f64> {
    let inv_b = 1.0 / labels.len() as f64;
    let mut g = probs.to_vec();
    for (row, &label) in g.chunks_exact_mut(classes).zip(labels) {
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    g
}

/// Backward pass without noise.
pub fn backward(graph: &LayerGraph, params: &ParamSet, cache: &ForwardCache) -> Result<BackwardRecord> {
    backward_with_noise(graph, params, cache, None)
}

/// Backward pass. When `noise` targets a conv layer, its local error is
/// perturbed before the weight gradient is formed; the perturbed error also
/// flows upstream if the injector says so.
pub fn backward_with_noise(graph: &LayerGraph, params: &ParamSet, cache: &ForwardCache, mut noise: Option<&mut NoiseInjector>) -> Result<BackwardRecord> {
    if cache.version != params.version() || cache.layers.len() != graph.layers.len() {
        return Err(Error::StaleCache { cache: cache.version, params: params.version() });
    }
    let n_layers = graph.layers.len();
    let mut grads = vec![LayerGrads::None; n_layers];
    let mut local_errors = vec![None; n_layers];
    let batch = cache.batch();
    let mut grad = Tensor4::from_vec_unchecked([batch, graph.classes, 1, 1], output_error(&cache.probs, &cache.labels, graph.classes));

    for i in (0..n_layers).rev() {
        let need_input_grad = i > 0;
        grad = match (&graph.layers[i], &params.layers[i], &cache.layers[i]) {
            (Layer::Conv(g), LayerParams::Conv { weight, bias }, LayerCache::Conv { unrolled, .. }) => {
                let (oc, k, n) = (g.out_channels, unrolled.rows(), unrolled.cols());
                let m = unrolled.cols_per_sample();
                let mut e = vec![0.0; oc * n];
                for b in 0..batch {
                    for o in 0..oc {
                        e[o * n + b * m..o * n + (b + 1) * m].copy_from_slice(&grad.data()[(b * oc + o) * m..(b * oc + o + 1) * m]);
                    }
                }
                let mut upstream = None;
                if let Some(inj) = noise.as_deref_mut().filter(|inj| inj.config.target_layer == i) {
                    if !inj.config.propagate_upstream {
                        upstream = Some(e.clone());
                    }
                    inj.inject(&mut e);
                }
                let mut gw = vec![0.0; oc * k];
                matmul_bt(oc, n, k, 1.0, &e, unrolled.data(), 0.0, &mut gw);
                let gb = bias.as_ref().map(|_| e.chunks_exact(n).map(|r| r.iter().sum()).collect());
                let next = if need_input_grad {
                    let src = upstream.as_deref().unwrap_or(&e);
                    let mut gu = vec![0.0; k * n];
                    matmul_at(k, oc, n, 1.0, weight, src, 0.0, &mut gu);
                    col2im(&UnrolledInput::from_parts(*unrolled.layout(), batch, gu)?)
                } else {
                    grad
                };
                grads[i] = LayerGrads::Conv { weight: gw, bias: gb };
                local_errors[i] = Some(e);
                next
            }
            (Layer::Relu, _, LayerCache::Relu { active }) => {
                for (v, &a) in grad.data_mut().iter_mut().zip(active) {
                    if !a {
                        *v = 0.0;
                    }
                }
                grad
            }
            (Layer::AvgPool { kernel, stride }, _, LayerCache::AvgPool { in_dims }) => avgpool_backward(&grad, *in_dims, *kernel, *stride),
            (Layer::FullyConnected { inputs, outputs }, LayerParams::Fc { weight, .. }, LayerCache::Fc { input, in_dims }) => {
                let g = grad.data();
                let mut gw = vec![0.0; outputs * inputs];
                matmul_at(*outputs, batch, *inputs, 1.0, g, input, 0.0, &mut gw);
                let mut gb = vec![0.0; *outputs];
                for row in g.chunks_exact(*outputs) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                grads[i] = LayerGrads::Fc { weight: gw, bias: gb };
                if need_input_grad {
                    let mut gx = vec![0.0; batch * inputs];
                    matmul(batch, *outputs, *inputs, 1.0, g, weight, 0.0, &mut gx);
                    Tensor4::from_vec_unchecked(*in_dims, gx)
                } else {
                    grad
                }
            }
            (Layer::Norm(_), LayerParams::Norm(state), LayerCache::Norm(c)) => {
                let ng = norm_backward(state, &grad, c)?;
                grads[i] = LayerGrads::Norm { gamma: ng.1, beta: ng.2 };
                ng.0
            }
            _ => return Err(Error::Shape(format!("cache of layer {i} does not match the graph"))),
        };
    }
    Ok(BackwardRecord { grads, local_errors })
}

fn norm_backward(state: &NormState, grad: &Tensor4, cache: &NormCache) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let g = state.backward(grad, cache)?;
    Ok((g.grad_x, g.grad_gamma, g.grad_beta))
}
