//! Evidence backtracking: from a chosen neuron, walk the recorded forward
//! trace layer by layer and keep only the inputs that contributed positively.
//!
//! The sign test is always the Hadamard product of recorded activations and
//! weights; biases never count as evidence. All products are evaluated in
//! f64 (exact for f32 operands), so strict-positivity decisions cannot be
//! affected by rounding, and every argmax tie breaks to the lowest index so
//! results are identical across platforms.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::forward::{argmax, ActivationTrace, LstmStepRecord, LstmWeights};
use crate::graph::{LayerOp, NetworkGraph};
use crate::tensor::{receptive_patch, ChannelRangeTable, ConvParams, Tensor};

/// One discriminative location: a flat index on vector layers, a
/// `(channel, x, y)` triple on spatial layers (x runs down rows, y across
/// columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Coord {
    Flat(usize),
    Spatial { ch: usize, x: usize, y: usize },
}

impl Coord {
    pub fn spatial(ch: usize, x: usize, y: usize) -> Self {
        Self::Spatial { ch, x, y }
    }
}

/// Ordered, deduplicated set of discriminative coordinates at one layer.
/// Insertion order is preserved, which keeps downstream output deterministic.
#[derive(Debug, Clone, Default)]
pub struct FixationSet {
    layer: String,
    coords: Vec<Coord>,
    seen: HashSet<Coord>,
    fallback_fired: bool,
}

impl FixationSet {
    pub fn new(layer: impl Into<String>) -> Self {
        Self {
            layer: layer.into(),
            ..Self::default()
        }
    }

    pub fn with_coords(layer: impl Into<String>, coords: impl IntoIterator<Item = Coord>) -> Self {
        let mut set = Self::new(layer);
        for c in coords {
            set.push(c);
        }
        set
    }

    /// Inserts unless already present; returns whether the coordinate was new.
    pub fn push(&mut self, coord: Coord) -> bool {
        if self.seen.insert(coord) {
            self.coords.push(coord);
            true
        } else {
            false
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn named(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }

    /// True if any argmax fallback fired while producing this set.
    pub fn fallback_fired(&self) -> bool {
        self.fallback_fired
    }

    pub fn mark_fallback(&mut self) {
        self.fallback_fired = true;
    }

    /// Union with `other`, keeping insertion order and OR-ing fallback flags.
    pub fn merge_from(&mut self, other: &FixationSet) {
        for &c in other.coords() {
            self.push(c);
        }
        self.fallback_fired |= other.fallback_fired;
    }

    fn flat(&self, context: &str) -> Result<Vec<usize>> {
        self.coords
            .iter()
            .map(|c| match c {
                Coord::Flat(i) => Ok(*i),
                Coord::Spatial { .. } => Err(Error::Coordinate(format!(
                    "{} expects flat coordinates, got {:?}",
                    context, c
                ))),
            })
            .collect()
    }
}

/// Where a conv fixation lands spatially in the layer below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvSpatialMode {
    /// Keep the location aligned with the receptive-field center (clamped to
    /// real input positions at borders). The cheaper route, and the default.
    #[default]
    SameLocation,
    /// Move to the strongest activation-times-weight position inside the
    /// receptive field of the winning channel.
    ArgmaxLocation,
}

/// What to do when no strictly positive contribution exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptySetFallback {
    /// Keep the single largest contribution so the trace never dies.
    #[default]
    Argmax,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BacktrackConfig {
    pub conv_spatial_mode: ConvSpatialMode,
    pub empty_set_fallback: EmptySetFallback,
}

/// Algorithm for fully connected layers: for every incoming neuron, keep all
/// inputs whose activation-times-weight product is strictly positive.
///
/// If the union over all incoming neurons is empty, the configured fallback
/// applies: `Argmax` returns the single best contribution for the first
/// incoming neuron (flagged on the result), `Abort` errors.
pub fn backtrack_fc(
    incoming: &FixationSet,
    weights: &Tensor,
    a_prev: &[f32],
    cfg: &BacktrackConfig,
) -> Result<FixationSet> {
    let (rows, cols) = weights.dims2()?;
    if a_prev.len() != cols {
        return Err(Error::Shape(format!(
            "fc backtrack: input length {} != weight columns {}",
            a_prev.len(),
            cols
        )));
    }
    let sources = incoming.flat("fc backtrack")?;
    let mut out = FixationSet::new("");
    for &i in &sources {
        if i >= rows {
            return Err(Error::Coordinate(format!(
                "fc backtrack: neuron {} outside {} rows",
                i, rows
            )));
        }
        for j in 0..cols {
            if a_prev[j] as f64 * weights.at2(i, j) as f64 > 0.0 {
                out.push(Coord::Flat(j));
            }
        }
    }
    if out.is_empty() && !sources.is_empty() {
        match cfg.empty_set_fallback {
            EmptySetFallback::Abort => return Err(Error::EmptyEvidence),
            EmptySetFallback::Argmax => {
                let i = sources[0];
                let contributions: Vec<f64> = (0..cols)
                    .map(|j| a_prev[j] as f64 * weights.at2(i, j) as f64)
                    .collect();
                out.push(Coord::Flat(argmax_f64(&contributions)));
                out.mark_fallback();
            }
        }
    }
    Ok(out)
}

fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Algorithm for convolution layers. For each incoming `(f, x, y)`: extract
/// the receptive patch, pick the channel whose summed Hadamard contribution
/// with filter `f` is largest, then place the location per
/// [`ConvSpatialMode`]. Padding positions can never be selected.
pub fn backtrack_conv(
    incoming: &FixationSet,
    weights: &Tensor,
    a_prev: &Tensor,
    params: &ConvParams,
    cfg: &BacktrackConfig,
) -> Result<FixationSet> {
    let (c_in, h, w) = a_prev.dims3()?;
    let k = params.kernel;
    let mut out = FixationSet::new("");
    for coord in incoming.coords() {
        let (f, x, y) = match *coord {
            Coord::Spatial { ch, x, y } => (ch, x, y),
            Coord::Flat(_) => {
                return Err(Error::Coordinate(
                    "conv backtrack expects spatial coordinates".into(),
                ))
            }
        };
        if f >= params.out_channels {
            return Err(Error::Coordinate(format!(
                "conv backtrack: filter {} outside {} output channels",
                f, params.out_channels
            )));
        }
        let (patch, mask) = receptive_patch(a_prev, x, y, params)?;
        if mask.iter().flatten().all(|&m| !m) {
            return Err(Error::Coordinate(format!(
                "receptive field of ({}, {}) lies entirely in padding",
                x, y
            )));
        }

        // per-channel contribution sums over the valid window positions
        let mut sums = vec![0.0f64; c_in];
        for (c, sum) in sums.iter_mut().enumerate() {
            for (u, row) in mask.iter().enumerate() {
                for (v, &valid) in row.iter().enumerate() {
                    if valid {
                        *sum += patch.at3(c, u, v) as f64
                            * weights.data()[((f * c_in + c) * k + u) * k + v] as f64;
                    }
                }
            }
        }
        let ch = argmax_f64(&sums);

        let (abs_x, abs_y) = match cfg.conv_spatial_mode {
            ConvSpatialMode::SameLocation => {
                let center = ((k - 1) / 2) as isize;
                let cx = (x * params.stride) as isize + center - params.pad as isize;
                let cy = (y * params.stride) as isize + center - params.pad as isize;
                (
                    cx.clamp(0, h as isize - 1) as usize,
                    cy.clamp(0, w as isize - 1) as usize,
                )
            }
            ConvSpatialMode::ArgmaxLocation => {
                let mut best: Option<(f64, usize, usize)> = None;
                for (u, row) in mask.iter().enumerate() {
                    for (v, &valid) in row.iter().enumerate() {
                        if !valid {
                            continue;
                        }
                        let prod = patch.at3(ch, u, v) as f64
                            * weights.data()[((f * c_in + ch) * k + u) * k + v] as f64;
                        if best.is_none_or(|(b, _, _)| prod > b) {
                            best = Some((prod, u, v));
                        }
                    }
                }
                let (_, u, v) = best.expect("mask has at least one valid position");
                let abs_x = (x * params.stride + u) as isize - params.pad as isize;
                let abs_y = (y * params.stride + v) as isize - params.pad as isize;
                (abs_x as usize, abs_y as usize)
            }
        };
        out.push(Coord::spatial(ch, abs_x, abs_y));
    }
    Ok(out)
}

/// Pooling routes each location to the maximum activation inside its window
/// (ties: lowest row, then lowest column).
pub fn backtrack_pool(
    incoming: &FixationSet,
    a_prev: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<FixationSet> {
    let (c_in, h, w) = a_prev.dims3()?;
    let mut out = FixationSet::new("");
    for coord in incoming.coords() {
        let (ch, x, y) = match *coord {
            Coord::Spatial { ch, x, y } => (ch, x, y),
            Coord::Flat(_) => {
                return Err(Error::Coordinate(
                    "pool backtrack expects spatial coordinates".into(),
                ))
            }
        };
        let (x0, y0) = (x * stride, y * stride);
        if ch >= c_in || x0 + kernel > h || y0 + kernel > w {
            return Err(Error::Coordinate(format!(
                "pool backtrack: window at ({}, {}, {}) outside input {}x{}x{}",
                ch, x, y, c_in, h, w
            )));
        }
        let mut best = (f32::NEG_INFINITY, 0usize, 0usize);
        for u in 0..kernel {
            for v in 0..kernel {
                let val = a_prev.at3(ch, x0 + u, y0 + v);
                if val > best.0 {
                    best = (val, u, v);
                }
            }
        }
        out.push(Coord::spatial(ch, x0 + best.1, y0 + best.2));
    }
    Ok(out)
}

/// ReLU (and softmax) change values, not locations: identity routing.
pub fn backtrack_relu(incoming: &FixationSet) -> FixationSet {
    let mut out = FixationSet::new("");
    for &c in incoming.coords() {
        out.push(c);
    }
    if incoming.fallback_fired() {
        out.mark_fallback();
    }
    out
}

/// Converts flat indices back to `(channel, x, y)` under the row-major,
/// channel-outermost layout.
pub fn backtrack_flatten(
    incoming: &FixationSet,
    spatial_shape: (usize, usize, usize),
) -> Result<FixationSet> {
    let (c, h, w) = spatial_shape;
    let mut out = FixationSet::new("");
    for &idx in &incoming.flat("flatten backtrack")? {
        if idx >= c * h * w {
            return Err(Error::Coordinate(format!(
                "flat index {} overflows shape ({}, {}, {})",
                idx, c, h, w
            )));
        }
        out.push(Coord::spatial(idx / (h * w), (idx % (h * w)) / w, idx % w));
    }
    Ok(out)
}

/// Splits concatenated-channel fixations back onto their source branches.
/// Returns one set per branch, in branch order.
pub fn backtrack_concat(
    incoming: &FixationSet,
    ranges: &ChannelRangeTable,
) -> Result<Vec<FixationSet>> {
    let mut out: Vec<FixationSet> = (0..ranges.branch_count())
        .map(|_| FixationSet::new(""))
        .collect();
    for coord in incoming.coords() {
        let (ch, x, y) = match *coord {
            Coord::Spatial { ch, x, y } => (ch, x, y),
            Coord::Flat(_) => {
                return Err(Error::Coordinate(
                    "concat backtrack expects spatial coordinates".into(),
                ))
            }
        };
        let (branch, local_ch) = ranges.locate(ch)?;
        out[branch].push(Coord::spatial(local_ch, x, y));
    }
    Ok(out)
}

/// Routes each fixation of an elementwise sum to whichever branch recorded
/// the higher activation there. Ties go to the skip (identity) path.
pub fn backtrack_add(
    incoming: &FixationSet,
    a_skip: &Tensor,
    a_delta: &Tensor,
) -> Result<(FixationSet, FixationSet)> {
    if a_skip.shape() != a_delta.shape() {
        return Err(Error::Shape(format!(
            "add backtrack: branch shapes differ: {:?} vs {:?}",
            a_skip.shape(),
            a_delta.shape()
        )));
    }
    let mut skip = FixationSet::new("");
    let mut delta = FixationSet::new("");
    for &coord in incoming.coords() {
        let (s, d) = (value_at(a_skip, &coord)?, value_at(a_delta, &coord)?);
        if s >= d {
            skip.push(coord);
        } else {
            delta.push(coord);
        }
    }
    Ok((skip, delta))
}

fn value_at(tensor: &Tensor, coord: &Coord) -> Result<f32> {
    match *coord {
        Coord::Flat(i) => tensor
            .data()
            .get(i)
            .copied()
            .ok_or_else(|| Error::Coordinate(format!("flat index {} out of range", i))),
        Coord::Spatial { ch, x, y } => {
            let (c, h, w) = tensor.dims3()?;
            if ch >= c || x >= h || y >= w {
                return Err(Error::Coordinate(format!(
                    "({}, {}, {}) outside {}x{}x{}",
                    ch, x, y, c, h, w
                )));
            }
            Ok(tensor.at3(ch, x, y))
        }
    }
}

/// LSTM traceback from chosen state units at the last unrolling.
///
/// Per step and active unit, evidence flows through the gates: the output
/// gate always; the forget gate when `f_t * c_(t-1)` is strictly positive;
/// the input gate and the candidate when `i_t * h(...)` is. Each selected
/// gate sum is then backtracked like a fully connected layer over its two
/// matrices, yielding embedding locations (kept at step 1) and state
/// locations (recursed to the previous step). `m_0` is all zeros and has no
/// earlier step, so only the embedding side is traced at step 1.
pub fn backtrack_lstm_units(
    records: &[LstmStepRecord],
    weights: &LstmWeights,
    start_units: &[usize],
    cfg: &BacktrackConfig,
) -> Result<FixationSet> {
    if records.is_empty() {
        return Err(Error::Graph("LSTM trace has no recorded steps".into()));
    }
    let units = weights.units();
    let mut active = FixationSet::with_coords("", start_units.iter().map(|&u| Coord::Flat(u)));
    let mut embedding_locs = FixationSet::new("");

    for t in (1..=records.len()).rev() {
        let rec = &records[t - 1];
        let zeros = vec![0.0f32; units];
        let (m_prev, c_prev): (&[f32], &[f32]) = if t >= 2 {
            (&records[t - 2].state, &records[t - 2].cell)
        } else {
            (&zeros, &zeros)
        };

        let mut next_active = FixationSet::new("");
        for &coord in active.coords() {
            let u = match coord {
                Coord::Flat(u) => u,
                Coord::Spatial { .. } => {
                    return Err(Error::Coordinate(
                        "lstm backtrack expects flat unit indices".into(),
                    ))
                }
            };
            if u >= units {
                return Err(Error::Coordinate(format!(
                    "lstm unit {} outside {} units",
                    u, units
                )));
            }

            // Gate selection, in equation order: input, forget, output, candidate.
            let input_term = rec.input_gate[u] as f64 * rec.candidate[u] as f64;
            let forget_term = rec.forget_gate[u] as f64 * c_prev[u] as f64;
            let mut gates: Vec<(&Tensor, &Tensor)> = Vec::with_capacity(4);
            if input_term > 0.0 {
                gates.push((&weights.w_ix, &weights.w_im));
            }
            if forget_term > 0.0 {
                gates.push((&weights.w_fx, &weights.w_fm));
            }
            gates.push((&weights.w_ox, &weights.w_om));
            if input_term > 0.0 {
                gates.push((&weights.w_cx, &weights.w_cm));
            }

            let unit_set = FixationSet::with_coords("", [Coord::Flat(u)]);
            for (wx, wm) in gates {
                // a fallback on either side counts, even where the traced
                // locations themselves are dropped (word side at t >= 2)
                let x_side = backtrack_fc(&unit_set, wx, &rec.x, cfg)?;
                if x_side.fallback_fired() {
                    embedding_locs.mark_fallback();
                }
                if t == 1 {
                    embedding_locs.merge_from(&x_side);
                }
                if t >= 2 {
                    let m_side = backtrack_fc(&unit_set, wm, m_prev, cfg)?;
                    if m_side.fallback_fired() {
                        embedding_locs.mark_fallback();
                    }
                    next_active.merge_from(&m_side);
                }
            }
        }
        if t >= 2 {
            if next_active.is_empty() {
                // every gate fell back onto the word side: the chain dies here
                embedding_locs.mark_fallback();
                return Ok(embedding_locs);
            }
            active = next_active;
        }
    }
    Ok(embedding_locs)
}

/// Spec'd entry point: start from the maximum element of the state at the
/// last unrolling and trace down to the image embedding.
pub fn backtrack_lstm(
    records: &[LstmStepRecord],
    weights: &LstmWeights,
    cfg: &BacktrackConfig,
) -> Result<FixationSet> {
    let last = records
        .last()
        .ok_or_else(|| Error::Graph("LSTM trace has no recorded steps".into()))?;
    let start = argmax(&last.state);
    backtrack_lstm_units(records, weights, &[start], cfg)
}

/// Deduplicated image-plane fixations: `(x, y)` pixel coordinates with
/// channels merged, in first-reached order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFixations {
    pub points: Vec<(usize, usize)>,
    pub fallback_fired: bool,
}

impl ImageFixations {
    /// Renders the exportable point table: `# key: value` header lines
    /// followed by one `x y` pair per line.
    pub fn to_point_file(&self, header: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (key, value) in header {
            out.push_str(&format!("# {}: {}\n", key, value));
        }
        out.push_str(&format!("# fallback_fired: {}\n", self.fallback_fired));
        out.push_str(&format!("# points: {}\n", self.points.len()));
        for (x, y) in &self.points {
            out.push_str(&format!("{} {}\n", x, y));
        }
        out
    }
}

/// Walks the graph in reverse topological order from `start`, applying the
/// per-kind handlers, splitting at add/concat and merging (with dedup) where
/// paths reconverge. Returns the image-plane fixations.
pub fn compute_fixations(
    graph: &NetworkGraph,
    trace: &ActivationTrace,
    start_layer: &str,
    start_coord: Coord,
    cfg: &BacktrackConfig,
) -> Result<ImageFixations> {
    validate_start(graph, start_layer, start_coord)?;
    let start_idx = graph
        .layers()
        .iter()
        .position(|l| l.name == start_layer)
        .ok_or_else(|| Error::Graph(format!("no layer named `{}`", start_layer)))?;

    let mut pending: HashMap<usize, FixationSet> = HashMap::new();
    pending.insert(
        start_idx,
        FixationSet::with_coords(start_layer, [start_coord]),
    );
    let index_of = |name: &str| -> usize {
        graph
            .layers()
            .iter()
            .position(|l| l.name == name)
            .expect("validated graph input names resolve")
    };

    let mut image_points: Vec<(usize, usize)> = Vec::new();
    let mut seen_points: HashSet<(usize, usize)> = HashSet::new();
    let mut fallback_fired = false;

    for idx in (0..=start_idx).rev() {
        let Some(set) = pending.remove(&idx) else {
            continue;
        };
        if set.is_empty() {
            fallback_fired |= set.fallback_fired();
            continue;
        }
        fallback_fired |= set.fallback_fired();
        let layer = &graph.layers()[idx];

        let push_to = |pending: &mut HashMap<usize, FixationSet>, input: &str, set: FixationSet| {
            let target = index_of(input);
            pending
                .entry(target)
                .or_insert_with(|| FixationSet::new(input))
                .merge_from(&set);
        };

        match &layer.op {
            LayerOp::Input => {
                let shape = graph.input_shape();
                for coord in set.coords() {
                    let (x, y) = match (*coord, shape) {
                        (Coord::Spatial { x, y, .. }, _) => (x, y),
                        (Coord::Flat(n), [_, h, w]) => {
                            let _ = h;
                            ((n % (shape[1] * shape[2])) / w, n % w)
                        }
                        (Coord::Flat(n), _) => (n, 0),
                    };
                    if seen_points.insert((x, y)) {
                        image_points.push((x, y));
                    }
                }
            }
            LayerOp::Conv {
                params, weights, ..
            } => {
                let prev = trace.output(&layer.inputs[0])?;
                let next = backtrack_conv(&set, graph.weight(weights)?, prev, params, cfg)?;
                push_to(&mut pending, &layer.inputs[0], next);
            }
            LayerOp::ReLU | LayerOp::Softmax => {
                push_to(&mut pending, &layer.inputs[0], backtrack_relu(&set));
            }
            LayerOp::MaxPool { kernel, stride } => {
                let prev = trace.output(&layer.inputs[0])?;
                let next = backtrack_pool(&set, prev, *kernel, *stride)?;
                push_to(&mut pending, &layer.inputs[0], next);
            }
            LayerOp::Flatten => {
                let shape = graph.shape_of(&layer.inputs[0])?;
                let spatial = match shape {
                    [c, h, w] => (*c, *h, *w),
                    other => {
                        return Err(Error::Shape(format!(
                            "flatten input must be 3-d, got {:?}",
                            other
                        )))
                    }
                };
                let next = backtrack_flatten(&set, spatial)?;
                push_to(&mut pending, &layer.inputs[0], next);
            }
            LayerOp::FullyConnected { weights, .. } => {
                let prev = trace.output(&layer.inputs[0])?;
                let next = backtrack_fc(&set, graph.weight(weights)?, prev.data(), cfg)?;
                push_to(&mut pending, &layer.inputs[0], next);
            }
            LayerOp::Concat => {
                let ranges = trace.concat_ranges(&layer.name)?;
                let sets = backtrack_concat(&set, ranges)?;
                for (branch, branch_set) in sets.into_iter().enumerate() {
                    if !branch_set.is_empty() {
                        push_to(&mut pending, &layer.inputs[branch], branch_set);
                    }
                }
            }
            LayerOp::Add => {
                let skip_act = trace.output(&layer.inputs[0])?;
                let delta_act = trace.output(&layer.inputs[1])?;
                let (skip, delta) = backtrack_add(&set, skip_act, delta_act)?;
                if !skip.is_empty() {
                    push_to(&mut pending, &layer.inputs[0], skip);
                }
                if !delta.is_empty() {
                    push_to(&mut pending, &layer.inputs[1], delta);
                }
            }
            LayerOp::LstmCell(spec) => {
                let records = trace.lstm_steps(&layer.name)?;
                let weights = LstmWeights::resolve(graph, spec)?;
                let units: Vec<usize> = set.flat("lstm backtrack")?;
                let next = backtrack_lstm_units(records, &weights, &units, cfg)?;
                push_to(&mut pending, &layer.inputs[0], next);
            }
        }
    }

    Ok(ImageFixations {
        points: image_points,
        fallback_fired,
    })
}

fn validate_start(graph: &NetworkGraph, layer: &str, coord: Coord) -> Result<()> {
    let shape = graph.shape_of(layer)?;
    match (coord, shape) {
        (Coord::Flat(i), [n]) if i < *n => Ok(()),
        (Coord::Spatial { ch, x, y }, [c, h, w]) if ch < *c && x < *h && y < *w => Ok(()),
        _ => Err(Error::Coordinate(format!(
            "start {:?} invalid for layer `{}` with shape {:?}",
            coord, layer, shape
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cfg() -> BacktrackConfig {
        BacktrackConfig::default()
    }

    fn random_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.next_symmetric(1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn fc_keeps_strictly_positive_products_only() {
        // A = [1, 0, 2], W row = [1, 1, -1]: products are [1, 0, -2]
        let w = Tensor::new(vec![1, 3], vec![1.0, 1.0, -1.0]).unwrap();
        let incoming = FixationSet::with_coords("fc", [Coord::Flat(0)]);
        let out = backtrack_fc(&incoming, &w, &[1.0, 0.0, 2.0], &cfg()).unwrap();
        assert_eq!(out.coords(), &[Coord::Flat(0)]);
        assert!(!out.fallback_fired());
    }

    #[test]
    fn fc_zero_input_falls_back_to_lowest_index_argmax() {
        let w = Tensor::new(vec![1, 3], vec![1.0, 1.0, -1.0]).unwrap();
        let incoming = FixationSet::with_coords("fc", [Coord::Flat(0)]);
        let out = backtrack_fc(&incoming, &w, &[0.0, 0.0, 0.0], &cfg()).unwrap();
        assert_eq!(out.coords(), &[Coord::Flat(0)]);
        assert!(out.fallback_fired());
    }

    #[test]
    fn fc_abort_mode_errors_on_empty_evidence() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let incoming = FixationSet::with_coords("fc", [Coord::Flat(0)]);
        let abort = BacktrackConfig {
            empty_set_fallback: EmptySetFallback::Abort,
            ..cfg()
        };
        assert!(matches!(
            backtrack_fc(&incoming, &w, &[-1.0, 0.0], &abort),
            Err(Error::EmptyEvidence)
        ));
    }

    #[test]
    fn fc_matches_double_loop_oracle() {
        let mut rng = SplitMix64::new(13);
        let w = random_tensor(&mut rng, vec![8, 16]);
        let a: Vec<f32> = (0..16).map(|_| rng.next_symmetric(1.0)).collect();
        let incoming =
            FixationSet::with_coords("fc", [Coord::Flat(1), Coord::Flat(4), Coord::Flat(7)]);
        let got = backtrack_fc(&incoming, &w, &a, &cfg()).unwrap();

        let mut expect: Vec<usize> = Vec::new();
        for &i in &[1usize, 4, 7] {
            for j in 0..16 {
                if a[j] as f64 * w.at2(i, j) as f64 > 0.0 && !expect.contains(&j) {
                    expect.push(j);
                }
            }
        }
        let got_idx: Vec<usize> = got
            .coords()
            .iter()
            .map(|c| match c {
                Coord::Flat(j) => *j,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got_idx, expect);
    }

    #[test]
    fn conv_single_channel_k1_both_modes_agree() {
        let mut rng = SplitMix64::new(2);
        let a_prev = random_tensor(&mut rng, vec![1, 6, 6]);
        let weights = Tensor::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let params = ConvParams {
            kernel: 1,
            stride: 2,
            pad: 0,
            out_channels: 2,
        };
        let incoming = FixationSet::with_coords("conv", [Coord::spatial(1, 2, 1)]);
        for mode in [
            ConvSpatialMode::SameLocation,
            ConvSpatialMode::ArgmaxLocation,
        ] {
            let out = backtrack_conv(
                &incoming,
                &weights,
                &a_prev,
                &params,
                &BacktrackConfig {
                    conv_spatial_mode: mode,
                    ..cfg()
                },
            )
            .unwrap();
            assert_eq!(out.coords(), &[Coord::spatial(0, 4, 2)]);
        }
    }

    #[test]
    fn conv_picks_channel_with_highest_contribution_sum() {
        // channel 0 contributes +3, channel 1 contributes -1
        let a_prev =
            Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let weights = Tensor::new(
            vec![1, 2, 2, 2],
            vec![1.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0, -1.0],
        )
        .unwrap();
        let params = ConvParams {
            kernel: 2,
            stride: 1,
            pad: 0,
            out_channels: 1,
        };
        let incoming = FixationSet::with_coords("conv", [Coord::spatial(0, 0, 0)]);
        let out = backtrack_conv(&incoming, &weights, &a_prev, &params, &cfg()).unwrap();
        match out.coords()[0] {
            Coord::Spatial { ch, .. } => assert_eq!(ch, 0),
            _ => panic!(),
        }
    }

    #[test]
    fn conv_matches_brute_force_on_seeded_cases() {
        let mut rng = SplitMix64::new(23);
        for _ in 0..200 {
            let c_in = 1 + (rng.next_u64() % 3) as usize;
            let k = 1 + (rng.next_u64() % 3) as usize;
            let params = ConvParams {
                kernel: k,
                stride: 1 + (rng.next_u64() % 2) as usize,
                // pad < kernel keeps every receptive field partly on real input
                pad: (rng.next_u64() % k.min(2) as u64) as usize,
                out_channels: 1 + (rng.next_u64() % 2) as usize,
            };
            let h = k + 2 + (rng.next_u64() % 3) as usize;
            let a_prev = random_tensor(&mut rng, vec![c_in, h, h]);
            let weights = random_tensor(&mut rng, vec![params.out_channels, c_in, k, k]);
            let (oh, ow) = params.output_size(h, h).unwrap();
            let f = (rng.next_u64() % params.out_channels as u64) as usize;
            let x = (rng.next_u64() % oh as u64) as usize;
            let y = (rng.next_u64() % ow as u64) as usize;
            let incoming = FixationSet::with_coords("conv", [Coord::spatial(f, x, y)]);

            // brute force channel selection
            let (patch, mask) = receptive_patch(&a_prev, x, y, &params).unwrap();
            let mut best_ch = 0usize;
            let mut best_sum = f64::NEG_INFINITY;
            for c in 0..c_in {
                let mut sum = 0.0f64;
                for u in 0..k {
                    for v in 0..k {
                        if mask[u][v] {
                            sum += patch.at3(c, u, v) as f64
                                * weights.data()[((f * c_in + c) * k + u) * k + v] as f64;
                        }
                    }
                }
                if sum > best_sum {
                    best_sum = sum;
                    best_ch = c;
                }
            }

            let out = backtrack_conv(
                &incoming,
                &weights,
                &a_prev,
                &params,
                &BacktrackConfig {
                    conv_spatial_mode: ConvSpatialMode::ArgmaxLocation,
                    ..cfg()
                },
            )
            .unwrap();
            let Coord::Spatial { ch, x: ax, y: ay } = out.coords()[0] else {
                panic!()
            };
            assert_eq!(ch, best_ch);

            // brute force location within the winning channel
            let mut best_loc = (f64::NEG_INFINITY, 0usize, 0usize);
            for u in 0..k {
                for v in 0..k {
                    if mask[u][v] {
                        let p = patch.at3(best_ch, u, v) as f64
                            * weights.data()[((f * c_in + best_ch) * k + u) * k + v] as f64;
                        if p > best_loc.0 {
                            best_loc = (p, u, v);
                        }
                    }
                }
            }
            let expect_x = (x * params.stride + best_loc.1) as isize - params.pad as isize;
            let expect_y = (y * params.stride + best_loc.2) as isize - params.pad as isize;
            assert_eq!((ax as isize, ay as isize), (expect_x, expect_y));

            // containment: traced location lies inside the receptive cone
            let lo_x = (x * params.stride) as isize - params.pad as isize;
            assert!((ax as isize) >= lo_x && (ax as isize) < lo_x + k as isize);
        }
    }

    #[test]
    fn pool_routes_to_window_argmax() {
        let a_prev = Tensor::new(vec![1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let incoming = FixationSet::with_coords("pool", [Coord::spatial(0, 0, 0)]);
        let out = backtrack_pool(&incoming, &a_prev, 2, 2).unwrap();
        assert_eq!(out.coords(), &[Coord::spatial(0, 0, 1)]);
    }

    #[test]
    fn pool_tie_breaks_to_window_top_left() {
        let a_prev = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        let incoming = FixationSet::with_coords("pool", [Coord::spatial(0, 0, 0)]);
        let out = backtrack_pool(&incoming, &a_prev, 2, 2).unwrap();
        assert_eq!(out.coords(), &[Coord::spatial(0, 0, 0)]);
    }

    #[test]
    fn pool_traced_value_equals_pooled_output() {
        let mut rng = SplitMix64::new(6);
        let a_prev = random_tensor(&mut rng, vec![2, 6, 6]);
        let pooled = crate::tensor::maxpool_forward(&a_prev, 2, 2).unwrap();
        let (c, oh, ow) = pooled.dims3().unwrap();
        for ch in 0..c {
            for x in 0..oh {
                for y in 0..ow {
                    let incoming = FixationSet::with_coords("pool", [Coord::spatial(ch, x, y)]);
                    let out = backtrack_pool(&incoming, &a_prev, 2, 2).unwrap();
                    let Coord::Spatial {
                        ch: tc,
                        x: tx,
                        y: ty,
                    } = out.coords()[0]
                    else {
                        panic!()
                    };
                    assert_eq!(a_prev.at3(tc, tx, ty), pooled.at3(ch, x, y));
                }
            }
        }
    }

    #[test]
    fn relu_passthrough_preserves_sets() {
        let incoming =
            FixationSet::with_coords("relu", [Coord::spatial(0, 1, 2), Coord::spatial(1, 0, 0)]);
        let out = backtrack_relu(&incoming);
        assert_eq!(out.coords(), incoming.coords());
        let empty = backtrack_relu(&FixationSet::new("relu"));
        assert!(empty.is_empty());
    }

    #[test]
    fn flatten_index_arithmetic() {
        let incoming = FixationSet::with_coords("flat", [Coord::Flat(5), Coord::Flat(0)]);
        let out = backtrack_flatten(&incoming, (2, 2, 2)).unwrap();
        assert_eq!(
            out.coords(),
            &[Coord::spatial(1, 0, 1), Coord::spatial(0, 0, 0)]
        );
    }

    #[test]
    fn flatten_roundtrips_every_index_of_3x4x5() {
        for idx in 0..60usize {
            let incoming = FixationSet::with_coords("flat", [Coord::Flat(idx)]);
            let out = backtrack_flatten(&incoming, (3, 4, 5)).unwrap();
            let Coord::Spatial { ch, x, y } = out.coords()[0] else {
                panic!()
            };
            assert_eq!(ch * 20 + x * 5 + y, idx);
        }
        assert!(backtrack_flatten(
            &FixationSet::with_coords("flat", [Coord::Flat(60)]),
            (3, 4, 5)
        )
        .is_err());
    }

    #[test]
    fn concat_reassigns_channels_to_branches() {
        let ranges = ChannelRangeTable::new(vec![(0, 2), (2, 5)]);
        let incoming =
            FixationSet::with_coords("cat", [Coord::spatial(3, 1, 1), Coord::spatial(0, 2, 2)]);
        let out = backtrack_concat(&incoming, &ranges).unwrap();
        assert_eq!(out[0].coords(), &[Coord::spatial(0, 2, 2)]);
        assert_eq!(out[1].coords(), &[Coord::spatial(1, 1, 1)]);
    }

    #[test]
    fn concat_split_and_remerge_reproduces_channels() {
        let mut rng = SplitMix64::new(19);
        let ranges = ChannelRangeTable::new(vec![(0, 1), (1, 4), (4, 6)]);
        let mut incoming = FixationSet::new("cat");
        for _ in 0..30 {
            incoming.push(Coord::spatial(
                rng.next_range(0, 6),
                rng.next_range(0, 4),
                rng.next_range(0, 4),
            ));
        }
        let split = backtrack_concat(&incoming, &ranges).unwrap();
        let mut rebuilt = FixationSet::new("cat");
        for (b, set) in split.iter().enumerate() {
            for &c in set.coords() {
                let Coord::Spatial { ch, x, y } = c else {
                    panic!()
                };
                rebuilt.push(Coord::spatial(ch + ranges.ranges()[b].0, x, y));
            }
        }
        let mut got: Vec<Coord> = rebuilt.coords().to_vec();
        let mut want: Vec<Coord> = incoming.coords().to_vec();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn add_routes_by_recorded_activation_with_skip_ties() {
        let a_skip = Tensor::new(vec![1, 1, 2], vec![5.0, 1.0]).unwrap();
        let a_delta = Tensor::new(vec![1, 1, 2], vec![3.0, 1.0]).unwrap();
        let incoming =
            FixationSet::with_coords("sum", [Coord::spatial(0, 0, 0), Coord::spatial(0, 0, 1)]);
        let (skip, delta) = backtrack_add(&incoming, &a_skip, &a_delta).unwrap();
        // 5 > 3 routes to skip; the tie at index 1 also goes to skip
        assert_eq!(
            skip.coords(),
            &[Coord::spatial(0, 0, 0), Coord::spatial(0, 0, 1)]
        );
        assert!(delta.is_empty());
    }

    #[test]
    fn add_partition_matches_elementwise_comparison() {
        let mut rng = SplitMix64::new(3);
        let a_skip = random_tensor(&mut rng, vec![2, 4, 4]);
        let a_delta = random_tensor(&mut rng, vec![2, 4, 4]);
        let mut incoming = FixationSet::new("sum");
        for _ in 0..25 {
            incoming.push(Coord::spatial(
                rng.next_range(0, 2),
                rng.next_range(0, 4),
                rng.next_range(0, 4),
            ));
        }
        let (skip, delta) = backtrack_add(&incoming, &a_skip, &a_delta).unwrap();
        for &c in incoming.coords() {
            let Coord::Spatial { ch, x, y } = c else {
                panic!()
            };
            let in_skip = skip.coords().contains(&c);
            let in_delta = delta.coords().contains(&c);
            if a_skip.at3(ch, x, y) >= a_delta.at3(ch, x, y) {
                assert!(in_skip && !in_delta);
            } else {
                assert!(in_delta && !in_skip);
            }
        }
    }

    #[test]
    fn repeated_backtracks_agree_including_order() {
        let detector = crate::fixtures::make_blob_detector(77);
        let graph = detector.fixture.graph().unwrap();
        let labeled = detector.image(0);
        let trace = crate::forward::run_forward(&graph, &labeled.image).unwrap();
        let class = crate::forward::predict_label(&trace).unwrap();
        let first = compute_fixations(&graph, &trace, "probs", Coord::Flat(class), &cfg()).unwrap();
        let second =
            compute_fixations(&graph, &trace, "probs", Coord::Flat(class), &cfg()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn dedup_is_idempotent_across_handlers() {
        let mut incoming = FixationSet::new("pool");
        // duplicates collapse on push already
        assert!(incoming.push(Coord::spatial(0, 0, 0)));
        assert!(!incoming.push(Coord::spatial(0, 0, 0)));
        let a_prev = Tensor::new(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = backtrack_pool(&incoming, &a_prev, 2, 2).unwrap();
        assert_eq!(out.len(), 1);
        let again = backtrack_relu(&out);
        assert_eq!(again.len(), 1);
    }
}
