//! Trainable parameters and the binary checkpoint format.
//!
//! Checkpoints are little-endian: the magic `MLNS`, a `u32` format version,
//! then tensors until end of file. Each tensor is a `u32` name length, the
//! UTF-8 name, a `u32` rank, `rank` `u64` dims, and the `f64` data.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Layer, LayerGraph};
use crate::error::{Error, Result};
use crate::norm::NormState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLNS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Stateless,
    /// `weight` is `OC × K` row-major: row `o` is the filter vector of output channel `o`.
    Conv { weight: Vec<f64>, bias: Option<Vec<f64>> },
    /// `weight` is `outputs × inputs` row-major.
    Fc { weight: Vec<f64>, bias: Vec<f64> },
    Norm(NormState),
}

/// Parameters of every layer plus a version counter bumped on each update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
    version: u64,
}

impl ParamSet {
    /// Fan-in scaled uniform init: weights and biases drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`. γ = 1 and β = 0 for norm layers.
    pub fn init(graph: &LayerGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let layers = graph
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match layer {
                Layer::Conv(g) => {
                    let k = g.patch_len();
                    let weight = draw(g.out_channels * k, k);
                    // drawn even when dropped so every variant shares the same weights
                    let bias = draw(g.out_channels, k);
                    let bias = graph.conv_has_bias(i).then_some(bias);
                    LayerParams::Conv { weight, bias }
                }
                Layer::FullyConnected { inputs, outputs } => {
                    let weight = draw(inputs * outputs, *inputs);
                    let bias = draw(*outputs, *inputs);
                    LayerParams::Fc { weight, bias }
                }
                Layer::Norm(spec) => LayerParams::Norm(spec.state()),
                Layer::Relu | Layer::AvgPool { .. } => LayerParams::Stateless,
            })
            .collect();
        ParamSet { layers, version: 0 }
    }

    /// All weights and biases zero; norm layers at their initial state.
    pub fn zeros(graph: &LayerGraph) -> Self {
        let mut p = ParamSet::init(graph, 0);
        for l in &mut p.layers {
            match l {
                LayerParams::Conv { weight, bias } => {
                    weight.fill(0.0);
                    if let Some(b) = bias {
                        b.fill(0.0);
                    }
                }
                LayerParams::Fc { weight, bias } => {
                    weight.fill(0.0);
                    bias.fill(0.0);
                }
                _ => {}
            }
        }
        p
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks the parameters as changed, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn conv_weight(&self, layer: usize) -> Option<&[f64]> {
        match self.layers.get(layer) {
            Some(LayerParams::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn conv_weight_mut(&mut self, layer: usize) -> Option<&mut Vec<f64>> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn norm(&self, layer: usize) -> Option<&NormState> {
        match self.layers.get(layer) {
            Some(LayerParams::Norm(s)) => Some(s),
            _ => None,
        }
    }

    pub fn norm_mut(&mut self, layer: usize) -> Option<&mut NormState> {
        match self.layers.get_mut(layer) {
            Some(LayerParams::Norm(s)) => Some(s),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks shapes against `graph`.
    pub fn validate(&self, graph: &LayerGraph) -> Result<()> {
        let reference = ParamSet::init(graph, 0);
        if reference.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} parameter layers for a {}-layer graph", self.layers.len(), graph.layers.len())));
        }
        for (i, (a, b)) in self.layers.iter().zip(&reference.layers).enumerate() {
            let same = match (a, b) {
                (LayerParams::Stateless, LayerParams::Stateless) => true,
                (LayerParams::Conv { weight: w, bias: bi }, LayerParams::Conv { weight: rw, bias: rb }) => {
                    w.len() == rw.len() && bi.as_ref().map(Vec::len) == rb.as_ref().map(Vec::len)
                }
                (LayerParams::Fc { weight: w, bias: bi }, LayerParams::Fc { weight: rw, bias: rb }) => w.len() == rw.len() && bi.len() == rb.len(),
                (LayerParams::Norm(s), LayerParams::Norm(r)) => s.channels == r.channels && s.validate().is_ok(),
                _ => false,
            };
            if !same {
                return Err(Error::Shape(format!("parameters of layer {i} do not match the graph")));
            }
        }
        Ok(())
    }

    /// Flat view used by checkpointing.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let mut push = |name: &str, dims: Vec<u64>, data: Vec<f64>| out.push(NamedTensor { name: format!("layer{i}.{name}"), dims, data });
            match l {
                LayerParams::Stateless => {}
                LayerParams::Conv { weight, bias } => {
                    push("weight", vec![weight.len() as u64], weight.clone());
                    if let Some(b) = bias {
                        push("bias", vec![b.len() as u64], b.clone());
                    }
                }
                LayerParams::Fc { weight, bias } => {
                    push("weight", vec![weight.len() as u64], weight.clone());
                    push("bias", vec![bias.len() as u64], bias.clone());
                }
                LayerParams::Norm(s) => {
                    let c = s.channels as u64;
                    push("gamma", vec![c], s.gamma.clone());
                    push("beta", vec![c], s.beta.clone());
                    push("running_mean", vec![c], s.running_mean.clone());
                    push("running_var", vec![c], s.running_var.clone());
                    push("updates", vec![], vec![s.updates as f64]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

/// Conv and FC weights are stored with their natural ranks.
fn natural_dims(graph: &LayerGraph, t: &NamedTensor) -> Vec<u64> {
    let layer: usize = t.name[5..t.name.find('.').unwrap()].parse().unwrap();
    match (&graph.layers[layer], t.name.ends_with(".weight")) {
        (Layer::Conv(g), true) => [g.out_channels, g.in_channels, g.kernel_h, g.kernel_w].map(|d| d as u64).to_vec(),
        (Layer::FullyConnected { inputs, outputs }, true) => vec![*outputs as u64, *inputs as u64],
        _ => t.dims.clone(),
    }
}

pub fn encode_checkpoint(graph: &LayerGraph, params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for t in params.named_tensors() {
        let dims = natural_dims(graph, &t);
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.at)))?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(graph: &LayerGraph, bytes: &[u8]) -> Result<ParamSet> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut tensors = std::collections::BTreeMap::new();
    while cur.at < bytes.len() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let dims: Vec<u64> = (0..rank).map(|_| cur.u64()).collect::<Result<_>>()?;
        let count = dims.iter().product::<u64>() as usize;
        let data: Vec<f64> = cur.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, data);
    }

    let mut params = ParamSet::init(graph, 0);
    let expected = params.named_tensors();
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, graph needs {}", tensors.len(), expected.len())));
    }
    let mut fetch = |name: String, len: usize| -> Result<Vec<f64>> {
        let data = tensors.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if data.len() != len {
            return Err(Error::Checkpoint(format!("{name} has {} values, expected {len}", data.len())));
        }
        Ok(data)
    };
    for (i, l) in params.layers.iter_mut().enumerate() {
        match l {
            LayerParams::Stateless => {}
            LayerParams::Conv { weight, bias } => {
                *weight = fetch(format!("layer{i}.weight"), weight.len())?;
                if let Some(b) = bias {
                    *b = fetch(format!("layer{i}.bias"), b.len())?;
                }
            }
            LayerParams::Fc { weight, bias } => {
                *weight = fetch(format!("layer{i}.weight"), weight.len())?;
                *bias = fetch(format!("layer{i}.bias"), bias.len())?;
            }
            LayerParams::Norm(s) => {
                let c = s.channels;
                s.gamma = fetch(format!("layer{i}.gamma"), c)?;
                s.beta = fetch(format!("layer{i}.beta"), c)?;
                s.running_mean = fetch(format!("layer{i}.running_mean"), c)?;
                s.running_var = fetch(format!("layer{i}.running_var"), c)?;
                s.updates = fetch(format!("layer{i}.updates"), 1)?[0] as u64;
            }
        }
    }
    params.validate(graph)?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, graph: &LayerGraph, params: &ParamSet) -> Result<()> {
    crate::data::records::write_atomic(path, &encode_checkpoint(graph, params))
}

pub fn read_checkpoint(path: &Path, graph: &LayerGraph) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(graph, &bytes)
}
