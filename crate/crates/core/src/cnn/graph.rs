//! Network topology: an ordered list of layers ending in a softmax
//! cross-entropy loss over the last fully connected layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormState, NormVariant, Placement, ThresholdRule, DEFAULT_EPS, DEFAULT_MOMENTUM, DEFAULT_THRESHOLD};
use crate::tensor::ConvGeometry;

/// Configuration of one normalization layer; its trainable state lives in the
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub channels: usize,
    pub variant: NormVariant,
    pub placement: Placement,
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub eps: f64,
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(channels: usize, variant: NormVariant, placement: Placement) -> Self {
        NormSpec {
            channels,
            variant,
            placement,
            threshold: DEFAULT_THRESHOLD,
            rule: ThresholdRule::ByName,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn state(&self) -> NormState {
        let mut s = NormState::new(self.channels, self.variant, self.placement);
        s.threshold = self.threshold;
        s.rule = self.rule;
        s.eps = self.eps;
        s.momentum = self.momentum;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvGeometry),
    Relu,
    AvgPool { kernel: usize, stride: usize },
    /// Flattens its input.
    FullyConnected { inputs: usize, outputs: usize },
    Norm(NormSpec),
}

impl Layer {
    fn describe(&self) -> String {
        match self {
            Layer::Conv(g) => format!(
                "Conv({}x{}x{}x{},s{},p{})",
                g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.padding
            ),
            Layer::Relu => "ReLU".into(),
            Layer::AvgPool { kernel, stride } => format!("AvgPool({kernel},{stride})"),
            Layer::FullyConnected { inputs, outputs } => format!("FC({inputs}x{outputs})"),
            Layer::Norm(s) => format!("Norm({:?},{:?},{})", s.variant, s.placement, s.channels),
        }
    }
}

/// Activation shape `(channels, height, width)` of a single sample.
pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl LayerGraph {
    pub fn new(input: Shape, classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let g = LayerGraph { input, classes, layers };
        g.shapes()?;
        Ok(g)
    }

    /// Input shape of every layer followed by the output shape of the last.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Shape(format!("layer {i} ({}): {msg}", layer.describe()));
            cur = match *layer {
                Layer::Conv(g) => {
                    if g.in_channels != cur[0] || g.out_channels == 0 {
                        return Err(bad(format!("expects {} input channels, receives {}", g.in_channels, cur[0])));
                    }
                    let (h, w) = g.output_hw(cur[1], cur[2]).map_err(|e| bad(e.to_string()))?;
                    [g.out_channels, h, w]
                }
                Layer::Relu => cur,
                Layer::AvgPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 || kernel > cur[1] || kernel > cur[2] {
                        return Err(bad(format!("pool does not fit {}x{}", cur[1], cur[2])));
                    }
                    [cur[0], (cur[1] - kernel) / stride + 1, (cur[2] - kernel) / stride + 1]
                }
                Layer::FullyConnected { inputs, outputs } => {
                    let flat = cur.iter().product::<usize>();
                    if inputs != flat || outputs == 0 {
                        return Err(bad(format!("expects {inputs} inputs, receives {flat}")));
                    }
                    [outputs, 1, 1]
                }
                Layer::Norm(s) => {
                    if s.channels != cur[0] {
                        return Err(bad(format!("has {} channels, receives {}", s.channels, cur[0])));
                    }
                    s.state().validate().map_err(|e| bad(e.to_string()))?;
                    cur
                }
            };
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(Layer::FullyConnected { outputs, .. }) if *outputs == self.classes => {}
            _ => return Err(Error::Shape(format!("the graph must end in a fully connected layer with {} outputs", self.classes))),
        }
        Ok(shapes)
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, Layer::Conv(_))).map(|(i, _)| i).collect()
    }

    /// Conv layers feeding straight into a norm layer carry no bias.
    pub fn conv_has_bias(&self, index: usize) -> bool {
        !matches!(self.layers.get(index + 1), Some(Layer::Norm(_)))
    }

    /// Stable textual summary of the topology, e.g. for `run.json`.
    pub fn fingerprint(&self) -> String {
        let body: Vec<String> = self.layers.iter().map(Layer::describe).collect();
        format!("in{}x{}x{}|{}|SoftmaxCE({})", self.input[0], self.input[1], self.input[2], body.join("|"), self.classes)
    }
}

/// Where to insert normalization layers into the reference network.
#[derive(Debug, Clone, PartialEq)]
pub struct NormPlan {
    pub variant: NormVariant,
    pub placement: Placement,
    /// Ordinals (0 = first conv) of the conv layers that receive a norm layer.
    pub convs: Vec<usize>,
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub eps: f64,
}

impl NormPlan {
    pub fn new(variant: NormVariant, placement: Placement, convs: Vec<usize>) -> Self {
        NormPlan { variant, placement, convs, threshold: DEFAULT_THRESHOLD, rule: ThresholdRule::ByName, eps: DEFAULT_EPS }
    }

    fn spec(&self, channels: usize) -> NormSpec {
        let mut s = NormSpec::new(channels, self.variant, self.placement);
        s.threshold = self.threshold;
        s.rule = self.rule;
        s.eps = self.eps;
        s
    }
}

/// The LeNet-style reference network on `1×32×32` inputs:
/// conv 5×5 (6) → ReLU → avgpool 2 → conv 5×5 (16) → ReLU → avgpool 2 → FC 400×10.
///
/// With a plan, a norm layer sits directly after the chosen convs (before
/// their ReLU) or directly before them.
pub fn lenet(plan: Option<&NormPlan>) -> LayerGraph {
    let convs = [ConvGeometry::new(1, 6, 5, 1, 0), ConvGeometry::new(6, 16, 5, 1, 0)];
    let mut layers = Vec::new();
    for (ordinal, g) in convs.iter().enumerate() {
        let norm = plan.filter(|p| p.convs.contains(&ordinal));
        if let Some(p) = norm.filter(|p| p.placement == Placement::BeforeConv) {
            layers.push(Layer::Norm(p.spec(g.in_channels)));
        }
        layers.push(Layer::Conv(*g));
        if let Some(p) = norm.filter(|p| p.placement == Placement::AfterConv) {
            layers.push(Layer::Norm(p.spec(g.out_channels)));
        }
        layers.push(Layer::Relu);
        layers.push(Layer::AvgPool { kernel: 2, stride: 2 });
    }
    layers.push(Layer::FullyConnected { inputs: 400, outputs: 10 });
    LayerGraph::new([1, 32, 32], 10, layers).expect("reference topology is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes() {
        let g = lenet(None);
        let shapes = g.shapes().unwrap();
        assert_eq!(shapes[1], [6, 28, 28]);
        assert_eq!(shapes[3], [6, 14, 14]);
        assert_eq!(shapes[4], [16, 10, 10]);
        assert_eq!(shapes[6], [16, 5, 5]);
        assert_eq!(*shapes.last().unwrap(), [10, 1, 1]);
        assert_eq!(g.conv_layers(), vec![0, 3]);
        assert!(g.conv_has_bias(0) && g.conv_has_bias(3));
    }

    #[test]
    fn norm_placement_orders() {
        let after = lenet(Some(&NormPlan::new(NormVariant::Standard, Placement::AfterConv, vec![0, 1])));
        assert!(matches!(after.layers[1], Layer::Norm(_)));
        assert!(!after.conv_has_bias(0));
        let prior = lenet(Some(&NormPlan::new(NormVariant::Standard, Placement::BeforeConv, vec![0, 1])));
        for &c in &prior.conv_layers() {
            assert!(matches!(prior.layers[c - 1], Layer::Norm(NormSpec { placement: Placement::BeforeConv, .. })));
            assert!(prior.conv_has_bias(c));
        }
        let second_only = lenet(Some(&NormPlan::new(NormVariant::Standard, Placement::BeforeConv, vec![1])));
        assert!(matches!(second_only.layers[0], Layer::Conv(_)));
        assert_ne!(after.fingerprint(), prior.fingerprint());
    }

    #[test]
    fn inconsistent_graphs_are_rejected() {
        let conv = Layer::Conv(ConvGeometry::new(2, 4, 3, 1, 0));
        assert!(LayerGraph::new([1, 8, 8], 10, vec![conv.clone(), Layer::FullyConnected { inputs: 144, outputs: 10 }]).is_err());
        assert!(LayerGraph::new([2, 8, 8], 10, vec![conv.clone(), Layer::FullyConnected { inputs: 100, outputs: 10 }]).is_err());
        assert!(LayerGraph::new([2, 8, 8], 10, vec![conv.clone(), Layer::Relu]).is_err());
        assert!(LayerGraph::new([2, 8, 8], 10, vec![conv, Layer::FullyConnected { inputs: 144, outputs: 10 }]).is_ok());
    }
}
