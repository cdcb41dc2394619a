use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Normalization inputs below this norm fall back to the basis vector `e_0`.
pub const NORM_EPSILON: f64 = 1e-12;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// The closed layer vocabulary. Spatial activations are laid out `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Zero-padded cross-correlation. Weight shape `[out_c, kh, kw, in_c]`.
    Conv2d {
        weight: String,
        stride: usize,
        padding: usize,
    },
    /// Adds a per-channel bias over the last dimension.
    BiasAdd { bias: String },
    Relu,
    MaxPool { size: usize, stride: usize },
    Flatten,
    /// `y = W x` with weight shape `[out, in]`.
    Dense { weight: String },
    L2Normalize,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::BiasAdd { .. } => "bias_add",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
            Layer::L2Normalize => "l2_normalize",
        }
    }
}

/// An ordered layer stack with its named weights.
///
/// Each graph carries a generation stamp that changes whenever weights are
/// mutated; traces remember the stamp so stale traces are rejected by
/// [`backward`].
#[derive(Debug, Clone)]
pub struct ComputationGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    weights: BTreeMap<String, Tensor>,
    shapes: Vec<Vec<usize>>,
    generation: u64,
}

impl PartialEq for ComputationGraph {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.weights == other.weights
    }
}

impl ComputationGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self, AutodiffError> {
        let shapes = infer_shapes(&input_shape, &layers, &weights)?;
        for (name, t) in &weights {
            if !t.is_finite() {
                return Err(AutodiffError::NonFiniteWeight { name: name.clone() });
            }
        }
        Ok(Self {
            input_shape,
            layers,
            weights,
            shapes,
            generation: next_generation(),
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Replaces a weight tensor of identical shape.
    pub fn set_weight(&mut self, name: &str, value: Tensor) -> Result<(), AutodiffError> {
        let slot = self
            .weights
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownWeight(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(AutodiffError::WeightShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                actual: value.shape().to_vec(),
            });
        }
        *slot = value;
        self.generation = next_generation();
        Ok(())
    }

    /// Mutable access to all weights. Invalidates outstanding traces.
    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        self.generation = next_generation();
        &mut self.weights
    }
}

fn weight_of<'a>(
    weights: &'a BTreeMap<String, Tensor>,
    name: &str,
) -> Result<&'a Tensor, AutodiffError> {
    weights
        .get(name)
        .ok_or_else(|| AutodiffError::UnknownWeight(name.to_string()))
}

fn infer_shapes(
    input_shape: &[usize],
    layers: &[Layer],
    weights: &BTreeMap<String, Tensor>,
) -> Result<Vec<Vec<usize>>, AutodiffError> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    if cur.is_empty() || cur.contains(&0) {
        return Err(AutodiffError::LayerShape {
            layer: 0,
            reason: format!("invalid input shape {cur:?}"),
        });
    }
    for (idx, layer) in layers.iter().enumerate() {
        let bad = |reason: String| AutodiffError::LayerShape { layer: idx, reason };
        cur = match layer {
            Layer::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let w = weight_of(weights, weight)?;
                if cur.len() != 3 || w.shape().len() != 4 {
                    return Err(bad(format!(
                        "conv2d needs [h,w,c] input and 4-d weight, got {cur:?} / {:?}",
                        w.shape()
                    )));
                }
                let (co, kh, kw, ci) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                if ci != cur[2] || *stride == 0 {
                    return Err(bad(format!(
                        "conv2d expects {ci} input channels (stride {stride}), got {}",
                        cur[2]
                    )));
                }
                let ph = cur[0] + 2 * padding;
                let pw = cur[1] + 2 * padding;
                if ph < kh || pw < kw {
                    return Err(bad("conv2d kernel larger than padded input".into()));
                }
                vec![(ph - kh) / stride + 1, (pw - kw) / stride + 1, co]
            }
            Layer::BiasAdd { bias } => {
                let b = weight_of(weights, bias)?;
                let last = *cur.last().expect("non-empty shape");
                if b.shape() != [last] {
                    return Err(bad(format!(
                        "bias shape {:?} does not match channel count {last}",
                        b.shape()
                    )));
                }
                cur
            }
            Layer::Relu | Layer::L2Normalize => cur,
            Layer::MaxPool { size, stride } => {
                if cur.len() != 3 || *size == 0 || *stride == 0 || cur[0] < *size || cur[1] < *size
                {
                    return Err(bad(format!("max_pool {size}/{stride} on {cur:?}")));
                }
                vec![
                    (cur[0] - size) / stride + 1,
                    (cur[1] - size) / stride + 1,
                    cur[2],
                ]
            }
            Layer::Flatten => vec![cur.iter().product()],
            Layer::Dense { weight } => {
                let w = weight_of(weights, weight)?;
                if cur.len() != 1 || w.shape().len() != 2 || w.shape()[1] != cur[0] {
                    return Err(bad(format!(
                        "dense weight {:?} incompatible with input {cur:?}",
                        w.shape()
                    )));
                }
                vec![w.shape()[0]]
            }
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

/// Every intermediate activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    generation: u64,
    input: Tensor,
    outputs: Vec<Tensor>,
    /// Per layer: argmax source index of each max-pool output.
    pool_indices: Vec<Option<Vec<usize>>>,
    /// Per layer: pre-normalization norm for L2-normalize layers.
    norms: Vec<Option<f64>>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn into_output(mut self) -> Tensor {
        self.outputs.pop().unwrap_or(self.input)
    }
}

pub fn forward(graph: &ComputationGraph, input: &Tensor) -> Result<ActivationTrace, AutodiffError> {
    if input.shape() != graph.input_shape() {
        return Err(AutodiffError::InputShape {
            layer: 0,
            expected: graph.input_shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    if !input.is_finite() {
        return Err(AutodiffError::NonFinite {
            index: input.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    let n = graph.layers.len();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
    let mut pool_indices = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for (idx, layer) in graph.layers.iter().enumerate() {
        let x = if idx == 0 { input } else { &outputs[idx - 1] };
        let out_shape = graph.shapes[idx].clone();
        let mut pool = None;
        let mut norm = None;
        let y = match layer {
            Layer::Conv2d {
                weight,
                stride,
                padding,
            } => conv_forward(x, &graph.weights[weight], *stride, *padding, out_shape),
            Layer::BiasAdd { bias } => {
                let b = graph.weights[bias].data();
                let c = b.len();
                let mut data = x.data().to_vec();
                for chunk in data.chunks_exact_mut(c) {
                    for (v, bv) in chunk.iter_mut().zip(b) {
                        *v += bv;
                    }
                }
                Tensor::from_parts(out_shape, data)
            }
            Layer::Relu => Tensor::from_parts(
                out_shape,
                x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            ),
            Layer::MaxPool { size, stride } => {
                let (y, idxs) = maxpool_forward(x, *size, *stride, out_shape);
                pool = Some(idxs);
                y
            }
            Layer::Flatten => Tensor::from_parts(out_shape, x.data().to_vec()),
            Layer::Dense { weight } => {
                let w = &graph.weights[weight];
                let inp = x.data();
                let cols = inp.len();
                let data = w
                    .data()
                    .chunks_exact(cols)
                    .map(|row| dot(row, inp))
                    .collect();
                Tensor::from_parts(out_shape, data)
            }
            Layer::L2Normalize => {
                let nrm = x.l2_norm();
                norm = Some(nrm);
                let data = if nrm < NORM_EPSILON {
                    let mut e0 = vec![0.0; x.len()];
                    e0[0] = 1.0;
                    e0
                } else {
                    x.data().iter().map(|v| v / nrm).collect()
                };
                Tensor::from_parts(out_shape, data)
            }
        };
        if !y.is_finite() {
            return Err(AutodiffError::NonFiniteActivation { layer: idx });
        }
        outputs.push(y);
        pool_indices.push(pool);
        norms.push(norm);
    }
    Ok(ActivationTrace {
        generation: graph.generation,
        input: input.clone(),
        outputs,
        pool_indices,
        norms,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: Vec<usize>,
) -> Tensor {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let xin = x.data();
    let wt = w.data();
    let mut out = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let in_off = (iy as usize * wd + ix as usize) * ci;
                    let patch = &xin[in_off..in_off + ci];
                    for (oc, a) in acc.iter_mut().enumerate() {
                        let w_off = ((oc * kh + ky) * kw + kx) * ci;
                        *a += dot(patch, &wt[w_off..w_off + ci]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn maxpool_forward(
    x: &Tensor,
    size: usize,
    stride: usize,
    out_shape: Vec<usize>,
) -> (Tensor, Vec<usize>) {
    let (wd, c) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let xin = x.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut idx = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = ((oy * stride + ky) * wd + ox * stride + kx) * c + ch;
                        // first maximum wins on ties
                        if xin[i] > best {
                            best = xin[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (Tensor::from_parts(out_shape, out), idx)
}

/// Which gradients [`backward_with`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
}

impl GradRequest {
    pub const ALL: Self = Self {
        params: true,
        input: true,
    };
    pub const PARAMS: Self = Self {
        params: true,
        input: false,
    };
    pub const INPUT: Self = Self {
        params: false,
        input: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Keyed like the graph's weights. Empty when parameter gradients were not requested.
    pub params: BTreeMap<String, Tensor>,
    /// Zero-sized when the input gradient was not requested.
    pub input: Tensor,
}

pub fn backward(
    graph: &ComputationGraph,
    trace: &ActivationTrace,
    output_grad: &Tensor,
) -> Result<Gradients, AutodiffError> {
    backward_with(graph, trace, output_grad, GradRequest::ALL)
}

pub fn backward_with(
    graph: &ComputationGraph,
    trace: &ActivationTrace,
    output_grad: &Tensor,
    request: GradRequest,
) -> Result<Gradients, AutodiffError> {
    if trace.generation != graph.generation || trace.outputs.len() != graph.layers.len() {
        return Err(AutodiffError::StaleTrace);
    }
    if output_grad.shape() != graph.output_shape() {
        return Err(AutodiffError::OutputGradShape {
            expected: graph.output_shape().to_vec(),
            actual: output_grad.shape().to_vec(),
        });
    }
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    if request.params {
        for (k, t) in &graph.weights {
            params.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
        }
    }
    let mut g = output_grad.clone();
    for idx in (0..graph.layers.len()).rev() {
        let x = if idx == 0 { &trace.input } else { &trace.outputs[idx - 1] };
        let y = &trace.outputs[idx];
        let need_input_grad = idx > 0 || request.input;
        let layer = &graph.layers[idx];
        let gx = match layer {
            Layer::Conv2d {
                weight,
                stride,
                padding,
            } => {
                let w = &graph.weights[weight];
                let dw = params.get_mut(weight).map(|t| t.data_mut());
                conv_backward(x, w, &g, *stride, *padding, dw, need_input_grad)
            }
            Layer::BiasAdd { bias } => {
                if let Some(db) = params.get_mut(bias) {
                    let db = db.data_mut();
                    let c = db.len();
                    for chunk in g.data().chunks_exact(c) {
                        for (d, gv) in db.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
                Some(g.data().to_vec())
            }
            Layer::Relu => Some(
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
            ),
            Layer::MaxPool { .. } => {
                let idxs = trace.pool_indices[idx]
                    .as_ref()
                    .ok_or(AutodiffError::StaleTrace)?;
                let mut gx = vec![0.0; x.len()];
                for (o, &src) in idxs.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                Some(gx)
            }
            Layer::Flatten => Some(g.data().to_vec()),
            Layer::Dense { weight } => {
                let w = &graph.weights[weight];
                let cols = x.len();
                if let Some(dw) = params.get_mut(weight) {
                    for (row, gv) in dw.data_mut().chunks_exact_mut(cols).zip(g.data()) {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (d, xv) in row.iter_mut().zip(x.data()) {
                            *d += gv * xv;
                        }
                    }
                }
                if need_input_grad {
                    let mut gx = vec![0.0; cols];
                    for (row, gv) in w.data().chunks_exact(cols).zip(g.data()) {
                        if *gv == 0.0 {
                            continue;
                        }
                        for (d, wv) in gx.iter_mut().zip(row) {
                            *d += gv * wv;
                        }
                    }
                    Some(gx)
                } else {
                    None
                }
            }
            Layer::L2Normalize => {
                let nrm = trace.norms[idx].ok_or(AutodiffError::StaleTrace)?;
                if nrm < NORM_EPSILON {
                    Some(vec![0.0; x.len()])
                } else {
                    let yg = dot(y.data(), g.data());
                    Some(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, yv)| (gv - yv * yg) / nrm)
                            .collect(),
                    )
                }
            }
        };
        match gx {
            Some(data) => g = Tensor::from_parts(x.shape().to_vec(), data),
            None => {
                g = Tensor::zeros(vec![0]);
                break;
            }
        }
    }
    let input = if request.input {
        g
    } else {
        Tensor::zeros(vec![0])
    };
    Ok(Gradients { params, input })
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    mut dw: Option<&mut [f64]>,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (oh, ow) = (g.shape()[0], g.shape()[1]);
    let xin = x.data();
    let wt = w.data();
    let gd = g.data();
    let mut gx = if need_input_grad {
        Some(vec![0.0; xin.len()])
    } else {
        None
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let gslice = &gd[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            if gslice.iter().all(|v| *v == 0.0) {
                continue;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let in_off = (iy as usize * wd + ix as usize) * ci;
                    for (oc, &gv) in gslice.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let w_off = ((oc * kh + ky) * kw + kx) * ci;
                        if let Some(dw) = dw.as_deref_mut() {
                            for (d, xv) in dw[w_off..w_off + ci]
                                .iter_mut()
                                .zip(&xin[in_off..in_off + ci])
                            {
                                *d += gv * xv;
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            for (d, wv) in gx[in_off..in_off + ci]
                                .iter_mut()
                                .zip(&wt[w_off..w_off + ci])
                            {
                                *d += gv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Fixed projection weights used to reduce a graph output to a scalar for
/// gradient checking.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 + ((i as f64) * 1.618_033_988_7).sin()).collect()
}

/// Compares analytic gradients of `sum_i c_i y_i` against central finite
/// differences over every input coordinate and every parameter.
///
/// Returns the maximum of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// A graph without parameters has nothing to check and yields 0.
pub fn grad_check(
    graph: &ComputationGraph,
    input: &Tensor,
    epsilon: f64,
) -> Result<f64, AutodiffError> {
    if graph.parameter_count() == 0 {
        forward(graph, input)?;
        return Ok(0.0);
    }
    let probe = probe_weights(graph.output_shape().iter().product());
    let objective = |g: &ComputationGraph, x: &Tensor| -> Result<f64, AutodiffError> {
        let t = forward(g, x)?;
        Ok(dot(t.output().data(), &probe))
    };
    let trace = forward(graph, input)?;
    let out_grad = Tensor::from_parts(graph.output_shape().to_vec(), probe.clone());
    let grads = backward(graph, &trace, &out_grad)?;

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst: f64 = 0.0;

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let up = objective(graph, &x)?;
        x.data_mut()[i] = orig - epsilon;
        let down = objective(graph, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(rel(grads.input.data()[i], numeric));
    }

    let mut g = graph.clone();
    let names: Vec<String> = graph.weights.keys().cloned().collect();
    for name in names {
        let len = graph.weights[&name].len();
        for i in 0..len {
            let orig = graph.weights[&name].data()[i];
            g.weights_mut().get_mut(&name).expect("weight").data_mut()[i] = orig + epsilon;
            let up = objective(&g, input)?;
            g.weights_mut().get_mut(&name).expect("weight").data_mut()[i] = orig - epsilon;
            let down = objective(&g, input)?;
            g.weights_mut().get_mut(&name).expect("weight").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            worst = worst.max(rel(grads.params[&name].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_graph(w: Vec<f64>, rows: usize, cols: usize, normalize: bool) -> ComputationGraph {
        let mut weights = BTreeMap::new();
        weights.insert("w".to_string(), Tensor::new(vec![rows, cols], w).unwrap());
        let mut layers = vec![Layer::Dense { weight: "w".into() }];
        if normalize {
            layers.push(Layer::L2Normalize);
        }
        ComputationGraph::new(vec![cols], layers, weights).unwrap()
    }

    #[test]
    fn zero_weights_fall_back_to_first_basis_vector() {
        let g = dense_graph(vec![0.0; 12], 4, 3, true);
        let t = forward(&g, &Tensor::from_vec(vec![0.3, -1.0, 2.0])).unwrap();
        assert_eq!(t.output().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_input_grad_is_transpose_product() {
        let w = vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
        let g = dense_graph(w.clone(), 2, 3, false);
        let t = forward(&g, &Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let og = Tensor::from_vec(vec![2.0, -3.0]);
        let grads = backward(&g, &t, &og).unwrap();
        let expected: Vec<f64> = (0..3).map(|j| w[j] * 2.0 + w[3 + j] * -3.0).collect();
        assert_eq!(grads.input.data(), expected.as_slice());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let g = dense_graph(vec![0.4, -0.2, 0.9, 0.1, 0.3, -0.7], 2, 3, true);
        let t = forward(&g, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let grads = backward(&g, &t, &Tensor::zeros(vec![2])).unwrap();
        assert!(grads.input.data().iter().all(|v| *v == 0.0));
        assert!(grads.params["w"].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_layer() {
        let g = dense_graph(vec![0.0; 6], 2, 3, false);
        let err = forward(&g, &Tensor::from_vec(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, AutodiffError::InputShape { layer: 0, .. }));

        let mut weights = BTreeMap::new();
        weights.insert("w".to_string(), Tensor::zeros(vec![2, 5]));
        let err = ComputationGraph::new(
            vec![4, 4, 3],
            vec![Layer::Flatten, Layer::Dense { weight: "w".into() }],
            weights,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::LayerShape { layer: 1, .. }));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut g = dense_graph(vec![0.5; 6], 2, 3, false);
        let t = forward(&g, &Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        g.set_weight("w", Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap())
            .unwrap();
        let err = backward(&g, &t, &Tensor::zeros(vec![2])).unwrap_err();
        assert!(matches!(err, AutodiffError::StaleTrace));
    }

    #[test]
    fn zero_parameter_graph_checks_vacuously() {
        let g = ComputationGraph::new(vec![2, 2, 1], vec![Layer::Flatten], BTreeMap::new()).unwrap();
        let x = Tensor::new(vec![2, 2, 1], vec![0.5, -0.25, 1.0, 2.0]).unwrap();
        assert_eq!(grad_check(&g, &x, 1e-3).unwrap(), 0.0);
        let bad = Tensor::from_vec(vec![1.0]);
        assert!(grad_check(&g, &bad, 1e-3).is_err());
    }

    #[test]
    fn linear_graph_grad_check_is_tight() {
        let g = dense_graph(vec![0.4, -0.2, 0.9, 0.1, 0.3, -0.7], 2, 3, false);
        let err = grad_check(&g, &Tensor::from_vec(vec![1.0, 2.0, 3.0]), 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let g =
            ComputationGraph::new(vec![2, 2, 1], vec![Layer::MaxPool { size: 2, stride: 2 }], BTreeMap::new())
                .unwrap();
        let x = Tensor::new(vec![2, 2, 1], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let t = forward(&g, &x).unwrap();
        assert_eq!(t.output().data(), &[0.9]);
        let grads = backward(&g, &t, &Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(grads.input.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
