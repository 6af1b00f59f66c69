//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use natmode::cnn::{backward, forward, Layer, LayerGraph, LayerGrads, LayerParams, NormSpec, ParamSet};
use natmode::linalg::SymMatrix;
use natmode::norm::{NormVariant, Placement};
use natmode::tensor::{ConvGeometry, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct MicroNet {
    pub graph: LayerGraph,
    pub params: ParamSet,
    pub x: Tensor4,
    pub labels: Vec<usize>,
}

/// Small random network with a conv layer, optional norm layers on either
/// side of it, ReLU, optional pooling and a classifier. Every other seed
/// carries at least one norm layer.
pub fn micro_net(seed: u64) -> MicroNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ic = rng.random_range(1..=3);
    let hw = rng.random_range(5..=7);
    let oc = rng.random_range(2..=3);
    let k = rng.random_range(2..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let classes = rng.random_range(3..=4);
    let variants = [NormVariant::Standard, NormVariant::Amplify, NormVariant::Suppress];
    let mut layers = Vec::new();
    let force_norm = seed % 2 == 0;
    if force_norm || rng.random_bool(0.3) {
        layers.push(Layer::Norm(NormSpec::new(ic, variants[rng.random_range(0..3)], Placement::BeforeConv)));
    }
    let geom = ConvGeometry::new(ic, oc, k, stride, pad);
    layers.push(Layer::Conv(geom));
    if force_norm || rng.random_bool(0.5) {
        layers.push(Layer::Norm(NormSpec::new(oc, variants[rng.random_range(0..3)], Placement::AfterConv)));
    }
    layers.push(Layer::Relu);
    let (oh, ow) = geom.output_hw(hw, hw).unwrap();
    let (mut fh, mut fw) = (oh, ow);
    if oh >= 2 && ow >= 2 && rng.random_bool(0.5) {
        layers.push(Layer::AvgPool { kernel: 2, stride: 2 });
        fh = (oh - 2) / 2 + 1;
        fw = (ow - 2) / 2 + 1;
    }
    layers.push(Layer::FullyConnected { inputs: oc * fh * fw, outputs: classes });
    let graph = LayerGraph::new([ic, hw, hw], classes, layers).unwrap();
    let mut params = ParamSet::init(&graph, seed.wrapping_mul(31).wrapping_add(7));
    // non-trivial affine parameters so γ and β enter the gradients
    for l in &mut params.layers {
        if let LayerParams::Norm(s) = l {
            for c in 0..s.channels {
                s.gamma[c] = rng.random_range(0.5..1.5);
                s.beta[c] = rng.random_range(-0.5..0.5);
            }
        }
    }
    let batch = 3;
    let scales = [0.3, 3.0, 0.9];
    let mut data = Vec::with_capacity(batch * ic * hw * hw);
    for _ in 0..batch {
        for c in 0..ic {
            for _ in 0..hw * hw {
                data.push(scales[c] * rng.random_range(-1.0..1.0));
            }
        }
    }
    let x = Tensor4::from_vec([batch, ic, hw, hw], data).unwrap();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    MicroNet { graph, params, x, labels }
}

/// Kind of parameter an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    FcWeight,
    FcBias,
    Gamma,
    Beta,
}

fn slots(params: &mut ParamSet) -> Vec<(ParamKind, &mut Vec<f64>)> {
    let mut out = Vec::new();
    for l in &mut params.layers {
        match l {
            LayerParams::Conv { weight, bias } => {
                out.push((ParamKind::ConvWeight, weight));
                if let Some(b) = bias {
                    out.push((ParamKind::ConvBias, b));
                }
            }
            LayerParams::Fc { weight, bias } => {
                out.push((ParamKind::FcWeight, weight));
                out.push((ParamKind::FcBias, bias));
            }
            LayerParams::Norm(s) => {
                out.push((ParamKind::Gamma, &mut s.gamma));
                out.push((ParamKind::Beta, &mut s.beta));
            }
            LayerParams::Stateless => {}
        }
    }
    out
}

fn analytic(grads: &[LayerGrads]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Conv { weight, bias } => {
                out.push(weight.clone());
                if let Some(b) = bias {
                    out.push(b.clone());
                }
            }
            LayerGrads::Fc { weight, bias } => {
                out.push(weight.clone());
                out.push(bias.clone());
            }
            LayerGrads::Norm { gamma, beta } => {
                out.push(gamma.clone());
                out.push(beta.clone());
            }
            LayerGrads::None => {}
        }
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for relative errors. Central differences at h = 1e-5
/// carry roughly 1e-11 of absolute roundoff, so gradients below this floor
/// are compared in absolute terms (error ≤ 1e-10).
pub const GRAD_FLOOR: f64 = 1e-4;

/// Worst relative error per parameter kind between backprop and central
/// differences with step `h`.
pub fn gradient_check(net: &MicroNet, h: f64) -> Vec<(ParamKind, f64)> {
    let loss_at = |p: &ParamSet| -> f64 {
        let mut p = p.clone();
        forward(&net.graph, &mut p, &net.x, &net.labels).unwrap().0
    };
    let mut p = net.params.clone();
    let (_, cache) = forward(&net.graph, &mut p, &net.x, &net.labels).unwrap();
    let rec = backward(&net.graph, &p, &cache).unwrap();
    let grads = analytic(&rec.grads);

    let mut worst: Vec<(ParamKind, f64)> = Vec::new();
    let mut base = net.params.clone();
    let n_slots = slots(&mut base).len();
    assert_eq!(n_slots, grads.len());
    for s in 0..n_slots {
        let (kind, len) = {
            let mut tmp = net.params.clone();
            let sl = slots(&mut tmp);
            (sl[s].0, sl[s].1.len())
        };
        let mut max_err: f64 = 0.0;
        for i in 0..len {
            let mut plus = net.params.clone();
            slots(&mut plus)[s].1[i] += h;
            let mut minus = net.params.clone();
            slots(&mut minus)[s].1[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            max_err = max_err.max(rel_err(grads[s][i], fd, GRAD_FLOOR));
        }
        match worst.iter_mut().find(|(k, _)| *k == kind) {
            Some(entry) => entry.1 = entry.1.max(max_err),
            None => worst.push((kind, max_err)),
        }
    }
    worst
}

/// Number of eigenvalues of `a` strictly below `x`, from the inertia of
/// `a − xI` (count of negative pivots in an unpivoted LDLᵀ elimination).
pub fn count_below(a: &SymMatrix, x: f64) -> usize {
    let n = a.order();
    let mut m: Vec<f64> = a.data().to_vec();
    for i in 0..n {
        m[i * n + i] -= x;
    }
    let mut negatives = 0;
    for k in 0..n {
        let mut pivot = m[k * n + k];
        if pivot == 0.0 {
            pivot = -f64::EPSILON * (1.0 + x.abs());
        }
        if pivot < 0.0 {
            negatives += 1;
        }
        for i in k + 1..n {
            let f = m[i * n + k] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in k + 1..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    negatives
}

/// Every eigenvalue of `a`, ascending, by bisection on the characteristic
/// polynomial's sign changes (Sylvester inertia counting).
pub fn bisection_eigenvalues(a: &SymMatrix, tol: f64) -> Vec<f64> {
    let n = a.order();
    // Gershgorin bounds
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        let r: f64 = (0..n).filter(|&j| j != i).map(|j| a.get(i, j).abs()).sum();
        lo = lo.min(a.get(i, i) - r);
        hi = hi.max(a.get(i, i) + r);
    }
    lo -= 1.0;
    hi += 1.0;
    (0..n)
        .map(|k| {
            // smallest x with count_below(x) > k
            let (mut a_lo, mut a_hi) = (lo, hi);
            while a_hi - a_lo > tol {
                let mid = 0.5 * (a_lo + a_hi);
                if count_below(a, mid) > k {
                    a_hi = mid;
                } else {
                    a_lo = mid;
                }
            }
            0.5 * (a_lo + a_hi)
        })
        .collect()
}

pub fn random_symmetric(n: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(-1.0..1.0);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    SymMatrix::from_rows(n, data).unwrap()
}
