//! Forward execution over a [`NetworkGraph`], recording every layer output.
//!
//! Backtracking never re-runs the network: it reads the
//! [`ActivationTrace`] produced here. The trace is immutable once the pass
//! completes and can be shared across threads.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{LayerOp, LayerSpec, LstmSpec, NetworkGraph};
use crate::tensor::{
    concat_channels, conv2d_forward, elementwise_add, fc_forward, maxpool_forward, relu,
    sigmoid_scalar, softmax, ChannelRangeTable, Tensor,
};

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes executed on the current thread. Lets tests assert
/// that backtracking ran on a recorded trace without triggering extra passes.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.with(|c| c.get())
}

/// Resolved weight matrices of one LSTM cell.
#[derive(Debug, Clone)]
pub struct LstmWeights {
    pub w_ix: Tensor,
    pub w_im: Tensor,
    pub w_fx: Tensor,
    pub w_fm: Tensor,
    pub w_ox: Tensor,
    pub w_om: Tensor,
    pub w_cx: Tensor,
    pub w_cm: Tensor,
}

impl LstmWeights {
    pub fn resolve(graph: &NetworkGraph, spec: &LstmSpec) -> Result<Self> {
        Ok(Self {
            w_ix: graph.weight(&spec.weights.w_ix)?.clone(),
            w_im: graph.weight(&spec.weights.w_im)?.clone(),
            w_fx: graph.weight(&spec.weights.w_fx)?.clone(),
            w_fm: graph.weight(&spec.weights.w_fm)?.clone(),
            w_ox: graph.weight(&spec.weights.w_ox)?.clone(),
            w_om: graph.weight(&spec.weights.w_om)?.clone(),
            w_cx: graph.weight(&spec.weights.w_cx)?.clone(),
            w_cm: graph.weight(&spec.weights.w_cm)?.clone(),
        })
    }

    pub fn units(&self) -> usize {
        self.w_ix.shape()[0]
    }

    pub fn x_dim(&self) -> usize {
        self.w_ix.shape()[1]
    }
}

/// Everything one unrolling step produced, pre- and post-nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStepRecord {
    pub x: Vec<f32>,
    /// Gate sums before the nonlinearity, in equation order.
    pub pre_input: Vec<f32>,
    pub pre_forget: Vec<f32>,
    pub pre_output: Vec<f32>,
    pub pre_candidate: Vec<f32>,
    pub input_gate: Vec<f32>,
    pub forget_gate: Vec<f32>,
    pub output_gate: Vec<f32>,
    /// tanh of the candidate sum.
    pub candidate: Vec<f32>,
    pub cell: Vec<f32>,
    pub state: Vec<f32>,
}

/// Per-layer outputs of one forward pass, plus the prediction when the graph
/// has a softmax head and per-step gate records for every LSTM cell.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    outputs: BTreeMap<String, Tensor>,
    image: Tensor,
    scores: Option<Vec<f32>>,
    predicted: Option<usize>,
    lstm: BTreeMap<String, Vec<LstmStepRecord>>,
    concat_ranges: BTreeMap<String, ChannelRangeTable>,
}

impl ActivationTrace {
    pub fn output(&self, layer: &str) -> Result<&Tensor> {
        self.outputs
            .get(layer)
            .ok_or_else(|| Error::Graph(format!("no recorded output for layer `{}`", layer)))
    }

    pub fn outputs(&self) -> &BTreeMap<String, Tensor> {
        &self.outputs
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn scores(&self) -> Option<&[f32]> {
        self.scores.as_deref()
    }

    pub fn predicted(&self) -> Option<usize> {
        self.predicted
    }

    pub fn lstm_steps(&self, layer: &str) -> Result<&[LstmStepRecord]> {
        self.lstm
            .get(layer)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Graph(format!("no LSTM records for layer `{}`", layer)))
    }

    pub fn concat_ranges(&self, layer: &str) -> Result<&ChannelRangeTable> {
        self.concat_ranges
            .get(layer)
            .ok_or_else(|| Error::Graph(format!("no concat ranges for layer `{}`", layer)))
    }
}

/// First index attaining the maximum; ties break to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the graph on `image` and records every layer output.
pub fn run_forward(graph: &NetworkGraph, image: &Tensor) -> Result<ActivationTrace> {
    if image.shape() != graph.input_shape() {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match graph input {:?}",
            image.shape(),
            graph.input_shape()
        )));
    }
    FORWARD_PASSES.with(|c| c.set(c.get() + 1));

    let mut outputs: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut lstm = BTreeMap::new();
    let mut concat_ranges = BTreeMap::new();

    for layer in graph.layers() {
        let out = match &layer.op {
            LayerOp::Input => image.clone(),
            LayerOp::Conv {
                params,
                weights,
                bias,
            } => conv2d_forward(
                &outputs[&layer.inputs[0]],
                graph.weight(weights)?,
                graph.weight(bias)?.data(),
                params,
            )?,
            LayerOp::ReLU => relu(&outputs[&layer.inputs[0]]),
            LayerOp::MaxPool { kernel, stride } => {
                maxpool_forward(&outputs[&layer.inputs[0]], *kernel, *stride)?
            }
            LayerOp::Flatten => {
                let input = &outputs[&layer.inputs[0]];
                Tensor::new(vec![input.len()], input.data().to_vec())?
            }
            LayerOp::FullyConnected { weights, bias } => {
                let out = fc_forward(
                    outputs[&layer.inputs[0]].data(),
                    graph.weight(weights)?,
                    graph.weight(bias)?.data(),
                )?;
                Tensor::new(vec![out.len()], out)?
            }
            LayerOp::Softmax => {
                let out = softmax(outputs[&layer.inputs[0]].data());
                Tensor::new(vec![out.len()], out)?
            }
            LayerOp::Concat => {
                let inputs: Vec<&Tensor> = layer.inputs.iter().map(|n| &outputs[n]).collect();
                let (out, ranges) = concat_channels(&inputs)?;
                concat_ranges.insert(layer.name.clone(), ranges);
                out
            }
            LayerOp::Add => {
                elementwise_add(&outputs[&layer.inputs[0]], &outputs[&layer.inputs[1]])?
            }
            LayerOp::LstmCell(spec) => {
                let weights = LstmWeights::resolve(graph, spec)?;
                let embedding = outputs[&layer.inputs[0]].data().to_vec();
                let extra = step_inputs(graph, spec)?;
                let records = run_lstm_unrolled(&weights, &embedding, &extra)?;
                let out = Tensor::new(
                    vec![spec.units],
                    records.last().expect("steps >= 1").state.clone(),
                )?;
                lstm.insert(layer.name.clone(), records);
                out
            }
        };
        outputs.insert(layer.name.clone(), out);
    }

    let (scores, predicted) = match graph.head() {
        Some(head) => {
            let s = outputs[&head.name].data().to_vec();
            let p = argmax(&s);
            (Some(s), Some(p))
        }
        None => (None, None),
    };

    Ok(ActivationTrace {
        outputs,
        image: image.clone(),
        scores,
        predicted,
        lstm,
        concat_ranges,
    })
}

fn step_inputs(graph: &NetworkGraph, spec: &LstmSpec) -> Result<Vec<Vec<f32>>> {
    let x_dim = graph.weight(&spec.weights.w_ix)?.shape()[1];
    match &spec.step_inputs {
        Some(name) => {
            let blob = graph.weight(name)?;
            Ok(blob
                .data()
                .chunks_exact(x_dim)
                .map(|c| c.to_vec())
                .collect())
        }
        None => Ok(vec![vec![0.0; x_dim]; spec.steps - 1]),
    }
}

/// Unrolls one LSTM cell: step 1 consumes `embedding` as x_1, later steps
/// consume `extra_inputs` in order. Initial state and cell are zeros.
pub fn run_lstm_unrolled(
    weights: &LstmWeights,
    embedding: &[f32],
    extra_inputs: &[Vec<f32>],
) -> Result<Vec<LstmStepRecord>> {
    let units = weights.units();
    if embedding.len() != weights.x_dim() {
        return Err(Error::Shape(format!(
            "embedding length {} does not match w_ix columns {}",
            embedding.len(),
            weights.x_dim()
        )));
    }
    let zero_bias = vec![0.0f32; units];
    let mut m_prev = vec![0.0f32; units];
    let mut c_prev = vec![0.0f32; units];
    let mut records = Vec::with_capacity(1 + extra_inputs.len());

    for t in 0..=extra_inputs.len() {
        let x: &[f32] = if t == 0 {
            embedding
        } else {
            &extra_inputs[t - 1]
        };
        let gate_sum = |wx: &Tensor, wm: &Tensor| -> Result<Vec<f32>> {
            let from_x = fc_forward(x, wx, &zero_bias)?;
            let from_m = fc_forward(&m_prev, wm, &zero_bias)?;
            Ok(from_x.iter().zip(&from_m).map(|(a, b)| a + b).collect())
        };
        let pre_input = gate_sum(&weights.w_ix, &weights.w_im)?;
        let pre_forget = gate_sum(&weights.w_fx, &weights.w_fm)?;
        let pre_output = gate_sum(&weights.w_ox, &weights.w_om)?;
        let pre_candidate = gate_sum(&weights.w_cx, &weights.w_cm)?;

        let input_gate: Vec<f32> = pre_input.iter().map(|&v| sigmoid_scalar(v)).collect();
        let forget_gate: Vec<f32> = pre_forget.iter().map(|&v| sigmoid_scalar(v)).collect();
        let output_gate: Vec<f32> = pre_output.iter().map(|&v| sigmoid_scalar(v)).collect();
        let candidate: Vec<f32> = pre_candidate.iter().map(|&v| v.tanh()).collect();

        let cell: Vec<f32> = (0..units)
            .map(|u| forget_gate[u] * c_prev[u] + input_gate[u] * candidate[u])
            .collect();
        let state: Vec<f32> = (0..units).map(|u| output_gate[u] * cell[u]).collect();

        records.push(LstmStepRecord {
            x: x.to_vec(),
            pre_input,
            pre_forget,
            pre_output,
            pre_candidate,
            input_gate,
            forget_gate,
            output_gate,
            candidate,
            cell: cell.clone(),
            state: state.clone(),
        });
        c_prev = cell;
        m_prev = state;
    }
    Ok(records)
}

/// The predicted class: argmax of the head's score vector, ties to the
/// lowest index.
pub fn predict_label(trace: &ActivationTrace) -> Result<usize> {
    trace
        .predicted
        .ok_or_else(|| Error::Graph("graph has no softmax head".into()))
}

/// Convenience wrapper used by tests and the orchestrator: the recorded
/// output of `layer.inputs[idx]`.
pub fn input_of<'t>(
    trace: &'t ActivationTrace,
    layer: &LayerSpec,
    idx: usize,
) -> Result<&'t Tensor> {
    let name = layer
        .inputs
        .get(idx)
        .ok_or_else(|| Error::Graph(format!("layer `{}` has no input #{}", layer.name, idx)))?;
    trace.output(name)
}
