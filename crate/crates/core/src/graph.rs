//! Declarative network description, weight loading and structural validation.
//!
//! A model on disk is a TOML manifest plus raw weight blobs. Blobs are
//! little-endian f32, row-major, no header; their shapes are declared in the
//! manifest. The manifest's layer list must be topologically ordered. See
//! `docs/model-format.md` for the full format.
//!
//! Batch-norm entries are a manifest-only construct: they are folded into the
//! preceding convolution at load time, so a built [`NetworkGraph`] contains
//! only the runtime layer kinds.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Tensor};

/// One layer entry as written in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestLayer {
    Input {
        name: String,
    },
    Conv {
        name: String,
        inputs: Vec<String>,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_channels: usize,
        weights: String,
        bias: String,
    },
    /// Folded into the preceding conv at load time; never part of a built graph.
    Batchnorm {
        name: String,
        inputs: Vec<String>,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        #[serde(default = "default_bn_eps")]
        eps: f32,
    },
    Relu {
        name: String,
        inputs: Vec<String>,
    },
    Maxpool {
        name: String,
        inputs: Vec<String>,
        kernel: usize,
        stride: usize,
    },
    Flatten {
        name: String,
        inputs: Vec<String>,
    },
    FullyConnected {
        name: String,
        inputs: Vec<String>,
        weights: String,
        bias: String,
    },
    Softmax {
        name: String,
        inputs: Vec<String>,
    },
    Concat {
        name: String,
        inputs: Vec<String>,
    },
    Add {
        /// `inputs[0]` is the skip (identity) path, `inputs[1]` the delta path.
        name: String,
        inputs: Vec<String>,
    },
    LstmCell {
        name: String,
        inputs: Vec<String>,
        units: usize,
        #[serde(default = "default_lstm_steps")]
        steps: usize,
        w_ix: String,
        w_im: String,
        w_fx: String,
        w_fm: String,
        w_ox: String,
        w_om: String,
        w_cx: String,
        w_cm: String,
        /// Optional `[steps-1, x_dim]` blob of inputs for steps 2..=T.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step_inputs: Option<String>,
    },
}

fn default_bn_eps() -> f32 {
    1e-5
}

fn default_lstm_steps() -> usize {
    1
}

impl ManifestLayer {
    pub fn name(&self) -> &str {
        match self {
            Self::Input { name }
            | Self::Conv { name, .. }
            | Self::Batchnorm { name, .. }
            | Self::Relu { name, .. }
            | Self::Maxpool { name, .. }
            | Self::Flatten { name, .. }
            | Self::FullyConnected { name, .. }
            | Self::Softmax { name, .. }
            | Self::Concat { name, .. }
            | Self::Add { name, .. }
            | Self::LstmCell { name, .. } => name,
        }
    }
}

/// Reference to one raw weight file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
}

/// The parsed model manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    pub layers: Vec<ManifestLayer>,
    pub blobs: BTreeMap<String, BlobRef>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Weight references of one LSTM cell (Eq-order: input, forget, output, candidate).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmWeightRefs {
    pub w_ix: String,
    pub w_im: String,
    pub w_fx: String,
    pub w_fm: String,
    pub w_ox: String,
    pub w_om: String,
    pub w_cx: String,
    pub w_cm: String,
}

impl LstmWeightRefs {
    pub fn all(&self) -> [(&'static str, &str); 8] {
        [
            ("w_ix", &self.w_ix),
            ("w_im", &self.w_im),
            ("w_fx", &self.w_fx),
            ("w_fm", &self.w_fm),
            ("w_ox", &self.w_ox),
            ("w_om", &self.w_om),
            ("w_cx", &self.w_cx),
            ("w_cm", &self.w_cm),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmSpec {
    pub units: usize,
    pub steps: usize,
    pub weights: LstmWeightRefs,
    pub step_inputs: Option<String>,
}

/// Runtime layer kinds. Batch norm never appears here.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input,
    Conv {
        params: ConvParams,
        weights: String,
        bias: String,
    },
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    FullyConnected {
        weights: String,
        bias: String,
    },
    Softmax,
    Concat,
    Add,
    LstmCell(LstmSpec),
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Input => "input",
            Self::Conv { .. } => "conv",
            Self::ReLU => "relu",
            Self::MaxPool { .. } => "maxpool",
            Self::Flatten => "flatten",
            Self::FullyConnected { .. } => "fully_connected",
            Self::Softmax => "softmax",
            Self::Concat => "concat",
            Self::Add => "add",
            Self::LstmCell(_) => "lstm_cell",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
}

/// Validated, immutable network: topologically ordered layers, resolved
/// weights, and the inferred output shape of every layer.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    weights: BTreeMap<String, Tensor>,
    input_shape: Vec<usize>,
    class_count: Option<usize>,
    shapes: BTreeMap<String, Vec<usize>>,
}

impl NetworkGraph {
    /// Builds and fully validates a graph from parsed parts. Batch-norm
    /// entries are folded into their preceding conv here.
    pub fn build(
        manifest: &Manifest,
        mut weights: BTreeMap<String, Tensor>,
    ) -> Result<NetworkGraph> {
        for (name, blob_ref) in &manifest.blobs {
            let t = weights
                .get(name)
                .ok_or_else(|| Error::MissingBlob(name.clone()))?;
            let expected: usize = blob_ref.shape.iter().product();
            if t.len() != expected {
                return Err(Error::Manifest(format!(
                    "blob `{}` declares shape {:?} ({} floats) but holds {}",
                    name,
                    blob_ref.shape,
                    expected,
                    t.len()
                )));
            }
        }

        let mut layers = Vec::with_capacity(manifest.layers.len());
        // alias map handles consumers that referenced a folded batch-norm layer
        let mut alias: HashMap<String, String> = HashMap::new();
        let resolve = |alias: &HashMap<String, String>, n: &str| -> String {
            alias.get(n).cloned().unwrap_or_else(|| n.to_string())
        };

        for ml in &manifest.layers {
            match ml {
                ManifestLayer::Batchnorm {
                    name,
                    inputs,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    if inputs.len() != 1 {
                        return Err(Error::Manifest(format!(
                            "batchnorm `{}` must have exactly one input",
                            name
                        )));
                    }
                    let target = resolve(&alias, &inputs[0]);
                    let conv_idx = layers
                        .iter()
                        .position(|l: &LayerSpec| l.name == target)
                        .ok_or_else(|| {
                            Error::Manifest(format!(
                                "batchnorm `{}` input `{}` not defined before it",
                                name, inputs[0]
                            ))
                        })?;
                    let (w_ref, b_ref) = match &layers[conv_idx].op {
                        LayerOp::Conv { weights, bias, .. } => (weights.clone(), bias.clone()),
                        other => {
                            return Err(Error::Manifest(format!(
                                "batchnorm `{}` must follow a conv, found `{}`",
                                name,
                                other.kind_name()
                            )))
                        }
                    };
                    fold_batchnorm(&mut weights, &w_ref, &b_ref, gamma, beta, mean, var, *eps)?;
                    alias.insert(name.clone(), target);
                }
                other => {
                    let name = other.name().to_string();
                    let op = lower_layer(other)?;
                    let inputs = manifest_inputs(other)
                        .iter()
                        .map(|n| resolve(&alias, n))
                        .collect();
                    layers.push(LayerSpec { name, op, inputs });
                }
            }
        }

        let graph = NetworkGraph::from_parts(
            layers,
            weights,
            manifest.input_shape.clone(),
            manifest.class_count,
        )?;
        Ok(graph)
    }

    /// Assembles a graph from already-lowered layers, then validates it.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, Tensor>,
        input_shape: Vec<usize>,
        class_count: Option<usize>,
    ) -> Result<NetworkGraph> {
        let violations = validate_layers(&layers, &weights, &input_shape, class_count);
        if !violations.is_empty() {
            return Err(Error::Graph(violations.join("; ")));
        }
        let shapes = infer_shapes(&layers, &weights, &input_shape)?;
        let index = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        Ok(NetworkGraph {
            layers,
            index,
            weights,
            input_shape,
            class_count,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.index
            .get(name)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::Graph(format!("no layer named `{}`", name)))
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> Option<usize> {
        self.class_count
    }

    /// Inferred output shape of a layer.
    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.shapes
            .get(name)
            .map(|s| s.as_slice())
            .ok_or_else(|| Error::Graph(format!("no layer named `{}`", name)))
    }

    pub fn shapes(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.shapes
    }

    pub fn input_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| l.op == LayerOp::Input)
            .expect("validated graph has an input layer")
    }

    /// The softmax layer that no other layer consumes, if there is one:
    /// the recognition head.
    pub fn head(&self) -> Option<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| matches!(l.op, LayerOp::Softmax))
            .find(|l| {
                !self
                    .layers
                    .iter()
                    .any(|other| other.inputs.contains(&l.name))
            })
    }

    /// Layer names that consume `name`.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.inputs.iter().any(|i| i == name))
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn validate(&self) -> Vec<String> {
        validate_layers(
            &self.layers,
            &self.weights,
            &self.input_shape,
            self.class_count,
        )
    }
}

fn manifest_inputs(ml: &ManifestLayer) -> &[String] {
    match ml {
        ManifestLayer::Input { .. } => &[],
        ManifestLayer::Conv { inputs, .. }
        | ManifestLayer::Batchnorm { inputs, .. }
        | ManifestLayer::Relu { inputs, .. }
        | ManifestLayer::Maxpool { inputs, .. }
        | ManifestLayer::Flatten { inputs, .. }
        | ManifestLayer::FullyConnected { inputs, .. }
        | ManifestLayer::Softmax { inputs, .. }
        | ManifestLayer::Concat { inputs, .. }
        | ManifestLayer::Add { inputs, .. }
        | ManifestLayer::LstmCell { inputs, .. } => inputs,
    }
}

fn lower_layer(ml: &ManifestLayer) -> Result<LayerOp> {
    Ok(match ml {
        ManifestLayer::Input { .. } => LayerOp::Input,
        ManifestLayer::Conv {
            kernel,
            stride,
            pad,
            out_channels,
            weights,
            bias,
            ..
        } => LayerOp::Conv {
            params: ConvParams {
                kernel: *kernel,
                stride: *stride,
                pad: *pad,
                out_channels: *out_channels,
            },
            weights: weights.clone(),
            bias: bias.clone(),
        },
        ManifestLayer::Batchnorm { name, .. } => {
            return Err(Error::Manifest(format!(
                "batchnorm `{}` reached lowering; folding should have removed it",
                name
            )))
        }
        ManifestLayer::Relu { .. } => LayerOp::ReLU,
        ManifestLayer::Maxpool { kernel, stride, .. } => LayerOp::MaxPool {
            kernel: *kernel,
            stride: *stride,
        },
        ManifestLayer::Flatten { .. } => LayerOp::Flatten,
        ManifestLayer::FullyConnected { weights, bias, .. } => LayerOp::FullyConnected {
            weights: weights.clone(),
            bias: bias.clone(),
        },
        ManifestLayer::Softmax { .. } => LayerOp::Softmax,
        ManifestLayer::Concat { .. } => LayerOp::Concat,
        ManifestLayer::Add { .. } => LayerOp::Add,
        ManifestLayer::LstmCell {
            units,
            steps,
            w_ix,
            w_im,
            w_fx,
            w_fm,
            w_ox,
            w_om,
            w_cx,
            w_cm,
            step_inputs,
            ..
        } => LayerOp::LstmCell(LstmSpec {
            units: *units,
            steps: *steps,
            weights: LstmWeightRefs {
                w_ix: w_ix.clone(),
                w_im: w_im.clone(),
                w_fx: w_fx.clone(),
                w_fm: w_fm.clone(),
                w_ox: w_ox.clone(),
                w_om: w_om.clone(),
                w_cx: w_cx.clone(),
                w_cm: w_cm.clone(),
            },
            step_inputs: step_inputs.clone(),
        }),
    })
}

/// Rescales a conv kernel and bias so the conv output equals conv + batch
/// norm: `scale = gamma / sqrt(var + eps)` multiplies each output channel's
/// kernel block, and the bias becomes `(bias - mean) * scale + beta`.
#[allow(clippy::too_many_arguments)]
fn fold_batchnorm(
    weights: &mut BTreeMap<String, Tensor>,
    w_ref: &str,
    b_ref: &str,
    gamma: &str,
    beta: &str,
    mean: &str,
    var: &str,
    eps: f32,
) -> Result<()> {
    let take = |weights: &BTreeMap<String, Tensor>, name: &str| -> Result<Vec<f32>> {
        Ok(weights
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))?
            .data()
            .to_vec())
    };
    let gamma = take(weights, gamma)?;
    let beta = take(weights, beta)?;
    let mean = take(weights, mean)?;
    let var = take(weights, var)?;
    let kernel = weights
        .get(w_ref)
        .ok_or_else(|| Error::MissingBlob(w_ref.to_string()))?
        .clone();
    let bias = take(weights, b_ref)?;

    let out_channels = kernel.shape()[0];
    if [gamma.len(), beta.len(), mean.len(), var.len(), bias.len()]
        .iter()
        .any(|&n| n != out_channels)
    {
        return Err(Error::Shape(format!(
            "batchnorm parameter length must equal conv out_channels {}",
            out_channels
        )));
    }

    let per_channel = kernel.len() / out_channels;
    let mut folded_kernel = kernel.data().to_vec();
    let mut folded_bias = bias;
    for f in 0..out_channels {
        let scale = (gamma[f] as f64 / (var[f] as f64 + eps as f64).sqrt()) as f32;
        for w in &mut folded_kernel[f * per_channel..(f + 1) * per_channel] {
            *w *= scale;
        }
        folded_bias[f] = (folded_bias[f] - mean[f]) * scale + beta[f];
    }
    weights.insert(
        w_ref.to_string(),
        Tensor::new(kernel.shape().to_vec(), folded_kernel)?,
    );
    weights.insert(
        b_ref.to_string(),
        Tensor::new(vec![out_channels], folded_bias)?,
    );
    Ok(())
}

/// Structural checks. Returns human-readable violations; empty means valid.
pub fn validate_layers(
    layers: &[LayerSpec],
    weights: &BTreeMap<String, Tensor>,
    input_shape: &[usize],
    class_count: Option<usize>,
) -> Vec<String> {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();

    let input_count = layers
        .iter()
        .filter(|l| matches!(l.op, LayerOp::Input))
        .count();
    if input_count != 1 {
        violations.push(format!(
            "graph must have exactly one input layer, found {}",
            input_count
        ));
    }

    for (i, layer) in layers.iter().enumerate() {
        if seen.insert(&layer.name, i).is_some() {
            violations.push(format!("duplicate layer name `{}`", layer.name));
        }
        match layer.op {
            LayerOp::Input => {
                if !layer.inputs.is_empty() {
                    violations.push(format!("input layer `{}` must not have inputs", layer.name));
                }
            }
            _ => {
                if layer.inputs.is_empty() {
                    violations.push(format!("layer `{}` has no inputs", layer.name));
                }
            }
        }
        for input in &layer.inputs {
            match seen.get(input.as_str()) {
                Some(&j) if j < i => {}
                Some(_) | None => violations.push(format!(
                    "layer `{}` input `{}` does not precede it (cycle or unknown layer)",
                    layer.name, input
                )),
            }
        }
        match &layer.op {
            LayerOp::Add => {
                if layer.inputs.len() != 2 {
                    violations.push(format!(
                        "add `{}` must have exactly 2 inputs, found {}",
                        layer.name,
                        layer.inputs.len()
                    ));
                }
            }
            LayerOp::Concat => {
                if layer.inputs.len() < 2 {
                    violations.push(format!(
                        "concat `{}` must have at least 2 inputs, found {}",
                        layer.name,
                        layer.inputs.len()
                    ));
                }
            }
            LayerOp::Conv {
                weights: w,
                bias: b,
                ..
            }
            | LayerOp::FullyConnected {
                weights: w,
                bias: b,
            } => {
                for name in [w, b] {
                    if !weights.contains_key(name) {
                        violations.push(format!(
                            "layer `{}` references missing blob `{}`",
                            layer.name, name
                        ));
                    }
                }
            }
            LayerOp::LstmCell(spec) => {
                for (field, name) in spec.weights.all() {
                    if !weights.contains_key(name) {
                        violations.push(format!(
                            "lstm `{}` {} references missing blob `{}`",
                            layer.name, field, name
                        ));
                    }
                }
                if let Some(seq) = &spec.step_inputs {
                    if !weights.contains_key(seq) {
                        violations.push(format!(
                            "lstm `{}` step_inputs references missing blob `{}`",
                            layer.name, seq
                        ));
                    }
                }
                if spec.steps == 0 {
                    violations.push(format!(
                        "lstm `{}` must unroll at least one step",
                        layer.name
                    ));
                }
            }
            _ => {}
        }
    }

    if violations.is_empty() {
        // Shape-level checks only make sense on a structurally sound graph.
        match infer_shapes(layers, weights, input_shape) {
            Ok(shapes) => {
                for layer in layers {
                    match &layer.op {
                        LayerOp::Add => {
                            let a = &shapes[&layer.inputs[0]];
                            let b = &shapes[&layer.inputs[1]];
                            if a != b {
                                violations.push(format!(
                                    "add `{}` input shapes differ: {:?} vs {:?}",
                                    layer.name, a, b
                                ));
                            }
                        }
                        LayerOp::Concat => {
                            let spatial: Vec<&[usize]> =
                                layer.inputs.iter().map(|i| &shapes[i][1..]).collect();
                            if spatial.windows(2).any(|w| w[0] != w[1]) {
                                violations.push(format!(
                                    "concat `{}` inputs disagree on spatial size",
                                    layer.name
                                ));
                            }
                        }
                        _ => {}
                    }
                }
                if let (Some(cc), Some(head)) = (
                    class_count,
                    layers
                        .iter()
                        .filter(|l| matches!(l.op, LayerOp::Softmax))
                        .find(|l| !layers.iter().any(|o| o.inputs.contains(&l.name))),
                ) {
                    if shapes[&head.name] != vec![cc] {
                        violations.push(format!(
                            "head `{}` has {:?} outputs but class_count is {}",
                            head.name, shapes[&head.name], cc
                        ));
                    }
                }
            }
            Err(e) => violations.push(format!("shape inference failed: {}", e)),
        }
    }

    violations
}

/// Deterministic output shape per layer. Errors if any layer produces a
/// non-positive dimension or sees an input of the wrong rank.
pub fn infer_shapes(
    layers: &[LayerSpec],
    weights: &BTreeMap<String, Tensor>,
    input_shape: &[usize],
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for layer in layers {
        let get = |name: &str| -> Result<&Vec<usize>> {
            shapes
                .get(name)
                .ok_or_else(|| Error::Graph(format!("input `{}` has no inferred shape", name)))
        };
        let dims3 = |s: &[usize], who: &str| -> Result<(usize, usize, usize)> {
            match s {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(Error::Shape(format!(
                    "layer `{}` needs a [C, H, W] input, got {:?}",
                    who, s
                ))),
            }
        };
        let shape = match &layer.op {
            LayerOp::Input => input_shape.to_vec(),
            LayerOp::Conv {
                params,
                weights: w_ref,
                ..
            } => {
                let (c, h, w) = dims3(get(&layer.inputs[0])?, &layer.name)?;
                let kernel = weights
                    .get(w_ref)
                    .ok_or_else(|| Error::MissingBlob(w_ref.clone()))?;
                let expect = vec![params.out_channels, c, params.kernel, params.kernel];
                if kernel.shape() != expect.as_slice() {
                    return Err(Error::Shape(format!(
                        "conv `{}` kernel shape {:?}, expected {:?}",
                        layer.name,
                        kernel.shape(),
                        expect
                    )));
                }
                let (oh, ow) = params.output_size(h, w)?;
                vec![params.out_channels, oh, ow]
            }
            LayerOp::ReLU => get(&layer.inputs[0])?.clone(),
            LayerOp::MaxPool { kernel, stride } => {
                let (c, h, w) = dims3(get(&layer.inputs[0])?, &layer.name)?;
                if *kernel > h || *kernel > w || *kernel == 0 || *stride == 0 {
                    return Err(Error::Shape(format!(
                        "pool `{}` window {} does not fit {}x{}",
                        layer.name, kernel, h, w
                    )));
                }
                vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerOp::Flatten => {
                let (c, h, w) = dims3(get(&layer.inputs[0])?, &layer.name)?;
                vec![c * h * w]
            }
            LayerOp::FullyConnected { weights: w_ref, .. } => {
                let input = get(&layer.inputs[0])?;
                let w = weights
                    .get(w_ref)
                    .ok_or_else(|| Error::MissingBlob(w_ref.clone()))?;
                let (m, n) = w.dims2()?;
                if input.as_slice() != [n] {
                    return Err(Error::Shape(format!(
                        "fc `{}` expects a [{}] input, got {:?}",
                        layer.name, n, input
                    )));
                }
                vec![m]
            }
            LayerOp::Softmax => {
                let input = get(&layer.inputs[0])?;
                if input.len() != 1 {
                    return Err(Error::Shape(format!(
                        "softmax `{}` needs a vector input, got {:?}",
                        layer.name, input
                    )));
                }
                input.clone()
            }
            LayerOp::Concat => {
                let mut total_c = 0usize;
                let (_, h0, w0) = dims3(get(&layer.inputs[0])?, &layer.name)?;
                for input in &layer.inputs {
                    let (c, h, w) = dims3(get(input)?, &layer.name)?;
                    if h != h0 || w != w0 {
                        return Err(Error::Shape(format!(
                            "concat `{}` spatial mismatch on `{}`",
                            layer.name, input
                        )));
                    }
                    total_c += c;
                }
                vec![total_c, h0, w0]
            }
            LayerOp::Add => {
                let a = get(&layer.inputs[0])?.clone();
                let b = get(&layer.inputs[1])?;
                if &a != b {
                    return Err(Error::Shape(format!(
                        "add `{}` input shapes differ: {:?} vs {:?}",
                        layer.name, a, b
                    )));
                }
                a
            }
            LayerOp::LstmCell(spec) => {
                let input = get(&layer.inputs[0])?;
                let w_ix = weights
                    .get(&spec.weights.w_ix)
                    .ok_or_else(|| Error::MissingBlob(spec.weights.w_ix.clone()))?;
                let (units, x_dim) = w_ix.dims2()?;
                if units != spec.units {
                    return Err(Error::Shape(format!(
                        "lstm `{}` declares {} units but w_ix has {} rows",
                        layer.name, spec.units, units
                    )));
                }
                if input.as_slice() != [x_dim] {
                    return Err(Error::Shape(format!(
                        "lstm `{}` expects a [{}] embedding, got {:?}",
                        layer.name, x_dim, input
                    )));
                }
                for (field, name) in spec.weights.all() {
                    let t = weights
                        .get(name)
                        .ok_or_else(|| Error::MissingBlob(name.to_string()))?;
                    let expect: &[usize] = if field.ends_with('x') {
                        &[spec.units, x_dim]
                    } else {
                        &[spec.units, spec.units]
                    };
                    if t.shape() != expect {
                        return Err(Error::Shape(format!(
                            "lstm `{}` {} has shape {:?}, expected {:?}",
                            layer.name,
                            field,
                            t.shape(),
                            expect
                        )));
                    }
                }
                if let Some(seq) = &spec.step_inputs {
                    let t = weights
                        .get(seq)
                        .ok_or_else(|| Error::MissingBlob(seq.clone()))?;
                    if spec.steps < 2 || t.shape() != [spec.steps - 1, x_dim] {
                        return Err(Error::Shape(format!(
                            "lstm `{}` step_inputs must be [steps-1={}, {}], got {:?}",
                            layer.name,
                            spec.steps.saturating_sub(1),
                            x_dim,
                            t.shape()
                        )));
                    }
                }
                vec![spec.units]
            }
        };
        if shape.contains(&0) {
            return Err(Error::Shape(format!(
                "layer `{}` produces a non-positive dimension: {:?}",
                layer.name, shape
            )));
        }
        shapes.insert(layer.name.clone(), shape);
    }
    Ok(shapes)
}

/// Reads a raw little-endian f32 blob.
pub fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Manifest(format!(
            "blob `{}` has {} bytes, shape {:?} requires {}",
            path.display(),
            bytes.len(),
            shape,
            expected
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Writes a tensor as a raw little-endian f32 blob.
pub fn write_blob(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a manifest and its weight blobs from disk and builds the graph.
/// Blob paths are resolved relative to the manifest's directory.
pub fn load_model(manifest_path: &Path) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest = Manifest::from_toml(&text)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut weights = BTreeMap::new();
    for (name, blob_ref) in &manifest.blobs {
        let tensor = read_blob(&dir.join(&blob_ref.file), &blob_ref.shape)?;
        weights.insert(name.clone(), tensor);
    }
    NetworkGraph::build(&manifest, weights)
}

/// Writes a manifest plus all referenced blobs into `dir`.
pub fn write_model(
    dir: &Path,
    manifest: &Manifest,
    weights: &BTreeMap<String, Tensor>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, blob_ref) in &manifest.blobs {
        let tensor = weights
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.clone()))?;
        write_blob(&dir.join(&blob_ref.file), tensor)?;
    }
    std::fs::write(dir.join("manifest.toml"), manifest.to_toml())?;
    Ok(())
}
