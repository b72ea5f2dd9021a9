//! Layers, models, and the minimal reverse-mode differentiation engine.
//!
//! Forward passes record a trace (cached inputs, quantized weights, masks,
//! pool indices); [`backward_ste`] walks the trace in reverse. In QAT mode
//! weights are replaced by `dequantize(quantize(w))` under each row's
//! assigned scheme, activations pass through clip-then-quantize-dequantize,
//! and gradients flow through every quantizer as identity inside its range
//! and zero outside (straight-through estimator).
//!
//! Quantization points are chosen so the simulated forward matches the
//! integer engine step for step: activations are quantized at the network
//! input and after each weighted layer's activation function, but never
//! after the last weighted layer (logits stay real).

use serde::{Deserialize, Serialize};

use crate::assignment::RowAssignment;
use crate::error::{Error, Result};
use crate::quant::{self, QuantConfig, QuantScheme};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    Qat,
}

/// Activation quantizer: symmetric fixed-point at `bits` with a hard clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantSpec {
    pub bits: u8,
    pub clip: f32,
}

impl Default for ActQuantSpec {
    fn default() -> Self {
        Self { bits: 4, clip: 6.0 }
    }
}

impl ActQuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "activation bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(Error::Config(format!("activation clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }

    /// Grid step: the clip value maps exactly onto the top code.
    pub fn step(&self) -> f32 {
        self.clip / self.qmax() as f32
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Layer {
    /// Fully connected: weight `[out, in]`, bias `[out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// 2-D convolution: weight `[out_c, in_c, kh, kw]`, bias `[out_c]`.
    /// A filter (one output channel) is one assignment row.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool",
            Layer::AvgPool2d { .. } => "avgpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Number of assignment rows (output channels / output units).
    pub fn rows(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight.shape[0]),
            _ => None,
        }
    }

    /// Flattened weight count per row.
    pub fn row_len(&self) -> Option<usize> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => {
                Some(weight.shape.iter().skip(1).product())
            }
            _ => None,
        }
    }

    /// The contiguous weight slice of row `r` (row-major layout makes each
    /// filter contiguous for both dense and conv weights).
    pub fn row_weights(&self, r: usize) -> &[f32] {
        let len = self.row_len().expect("row_weights on unweighted layer");
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => {
                &weight.data[r * len..(r + 1) * len]
            }
            _ => unreachable!(),
        }
    }

    pub fn set_row_weights(&mut self, r: usize, values: &[f64]) {
        let len = self.row_len().expect("set_row_weights on unweighted layer");
        assert_eq!(values.len(), len);
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => {
                for (dst, &src) in weight.data[r * len..(r + 1) * len].iter_mut().zip(values) {
                    *dst = src as f32;
                }
            }
            _ => unreachable!(),
        }
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

/// An ordered layer stack plus its per-layer row assignments (populated by
/// the assignment step) and the activation quantizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub assignments: Vec<Option<RowAssignment>>,
    pub act_quant: ActQuantSpec,
    /// When set, biases are also fake-quantized (8-bit fixed) in QAT
    /// forward passes. Off by default: biases stay 32-bit real.
    pub bias_quant: bool,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Self {
        let n = layers.len();
        Self {
            layers,
            assignments: vec![None; n],
            act_quant: ActQuantSpec::default(),
            bias_quant: false,
        }
    }

    /// True when every weighted layer has a row assignment.
    pub fn fully_assigned(&self) -> bool {
        self.layers
            .iter()
            .zip(&self.assignments)
            .all(|(l, a)| !l.is_weighted() || a.is_some())
    }

    /// Indices of weighted layers, in order.
    pub fn weighted_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_weighted().then_some(i))
            .collect()
    }

    /// Is there a weighted layer strictly after `idx`?
    pub(crate) fn has_weighted_after(&self, idx: usize) -> bool {
        self.layers[idx + 1..].iter().any(|l| l.is_weighted())
    }
}

pub struct LayerGrads {
    pub dw: Tensor,
    pub db: Tensor,
}

pub struct Gradients {
    /// One entry per model layer; `Some` only for weighted layers.
    pub by_layer: Vec<Option<LayerGrads>>,
}

enum TraceStep {
    /// Clip + quantize-dequantize of activations; mask gates the gradient.
    ActQuant { mask: Vec<f32> },
    Dense {
        layer: usize,
        input: Tensor,
        w_used: Tensor,
        w_mask: Option<Vec<f32>>,
    },
    Conv {
        layer: usize,
        in_shape: Vec<usize>,
        /// im2col buffers, one `[k × p]` matrix per sample.
        cols: Vec<f32>,
        k: usize,
        p: usize,
        map: Vec<i64>,
        w_used: Tensor,
        w_mask: Option<Vec<f32>>,
    },
    Relu { mask: Vec<f32> },
    MaxPool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        layer: usize,
        in_shape: Vec<usize>,
    },
    Flatten { in_shape: Vec<usize> },
}

/// Everything [`backward_ste`] needs from a forward pass, plus the output.
pub struct ForwardTrace {
    steps: Vec<TraceStep>,
    pub output: Tensor,
}

/// Runs the model on a `[batch, ...]` input and returns the logits.
pub fn forward(model: &Model, input: &Tensor, mode: Mode) -> Result<Tensor> {
    forward_trace(model, input, mode).map(|t| t.output)
}

/// Fake-quantizes one weighted layer's weights row by row under its
/// assignment, returning the dequantized weights and the STE pass mask.
pub fn fake_quant_weights(layer: &Layer, assignment: &RowAssignment) -> Result<(Tensor, Vec<f32>)> {
    let rows = layer.rows().ok_or_else(|| Error::Contract("not a weighted layer".into()))?;
    if assignment.rows.len() != rows {
        return Err(Error::Contract(format!(
            "assignment covers {} rows, layer has {rows}",
            assignment.rows.len()
        )));
    }
    let weight = layer.weight().unwrap();
    let mut w_used = vec![0f32; weight.data.len()];
    let mut mask = vec![0f32; weight.data.len()];
    let len = layer.row_len().unwrap();
    for r in 0..rows {
        let plan = assignment.rows[r];
        let w = layer.row_weights(r);
        let scale = quant::row_scale(w, plan.scheme, plan.bits);
        let config = QuantConfig::new(plan.scheme, plan.bits, scale)?;
        let out = &mut w_used[r * len..(r + 1) * len];
        let m = &mut mask[r * len..(r + 1) * len];
        match plan.scheme {
            QuantScheme::Fixed => {
                let qmax = config.qmax() as f32;
                for (i, &x) in w.iter().enumerate() {
                    let code = quant::fixed_quantize(x, &config)?;
                    out[i] = code as f32 * scale;
                    // pass unless the clamp engaged
                    m[i] = if (x / scale).round().abs() <= qmax { 1.0 } else { 0.0 };
                }
            }
            QuantScheme::PoT => {
                for (i, &x) in w.iter().enumerate() {
                    let code = quant::pot_quantize(x, &config)?;
                    out[i] = quant::pot_code_value(code, scale);
                    // pass while inside the representable magnitude range
                    m[i] = if x.abs() / scale <= 1.0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok((
        Tensor {
            shape: weight.shape.clone(),
            data: w_used,
        },
        mask,
    ))
}

/// 8-bit fixed fake-quantization of a bias vector (only used when the
/// bias-quantization knob is on).
pub(crate) fn fake_quant_bias_values(bias: &Tensor) -> Vec<f32> {
    let max_abs = bias.data.iter().fold(0f32, |m, b| m.max(b.abs()));
    if max_abs == 0.0 {
        return bias.data.clone();
    }
    let scale = max_abs / 127.0;
    bias.data
        .iter()
        .map(|&b| (b / scale).round().clamp(-127.0, 127.0) * scale)
        .collect()
}

fn fake_quant_bias(bias: &Tensor) -> Tensor {
    Tensor {
        shape: bias.shape.clone(),
        data: fake_quant_bias_values(bias),
    }
}

/// Clip-then-quantize-dequantize for activations; returns values and the
/// STE mask (pass inside `[-clip, clip]`).
fn act_quantize(x: &Tensor, spec: &ActQuantSpec) -> (Tensor, Vec<f32>) {
    let step = spec.step();
    let clip = spec.clip;
    let mut data = Vec::with_capacity(x.data.len());
    let mut mask = Vec::with_capacity(x.data.len());
    for &v in &x.data {
        let clipped = v.clamp(-clip, clip);
        data.push((clipped / step).round() * step);
        mask.push(if v.abs() <= clip { 1.0 } else { 0.0 });
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        mask,
    )
}

/// Builds the im2col index map for a conv: entry `k * p_total + p` is the
/// flat input offset (within one sample) or -1 for padding.
pub(crate) fn im2col_map(
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Vec<i64>)> {
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let padded_h = in_h + 2 * padding;
    let padded_w = in_w + 2 * padding;
    if padded_h < kh || padded_w < kw {
        return Err(Error::Shape(format!(
            "conv kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
        )));
    }
    let out_h = (padded_h - kh) / stride + 1;
    let out_w = (padded_w - kw) / stride + 1;
    let p_total = out_h * out_w;
    let k_total = in_c * kh * kw;
    let mut map = vec![-1i64; k_total * p_total];
    for ci in 0..in_c {
        for dy in 0..kh {
            for dx in 0..kw {
                let k = (ci * kh + dy) * kw + dx;
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as i64 - padding as i64;
                    for ox in 0..out_w {
                        let ix = (ox * stride + dx) as i64 - padding as i64;
                        if iy >= 0 && iy < in_h as i64 && ix >= 0 && ix < in_w as i64 {
                            let p = oy * out_w + ox;
                            map[k * p_total + p] = (ci * in_h * in_w) as i64 + iy * in_w as i64 + ix;
                        }
                    }
                }
            }
        }
    }
    Ok((out_h, out_w, map))
}

fn pool_geometry(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("pool kernel and stride must be positive".into()));
    }
    if in_h < kernel || in_w < kernel {
        return Err(Error::Shape(format!(
            "pool kernel {kernel} larger than input {in_h}x{in_w}"
        )));
    }
    Ok(((in_h - kernel) / stride + 1, (in_w - kernel) / stride + 1))
}

pub(crate) fn forward_trace(model: &Model, input: &Tensor, mode: Mode) -> Result<ForwardTrace> {
    if input.batch() == 0 {
        return Err(Error::Domain("empty input batch".into()));
    }
    model.act_quant.validate()?;
    let qat = mode == Mode::Qat;
    let mut steps = Vec::new();
    let mut x = input.clone();

    if qat {
        let (q, mask) = act_quantize(&x, &model.act_quant);
        x = q;
        steps.push(TraceStep::ActQuant { mask });
    }

    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Dense { weight, bias } => {
                if x.rank() != 2 || x.shape[1] != weight.shape[1] {
                    return Err(Error::Shape(format!(
                        "dense layer {idx} expects [batch, {}], got {:?}",
                        weight.shape[1], x.shape
                    )));
                }
                let (w_used, w_mask) = if qat {
                    let assignment = model.assignments[idx].as_ref().ok_or_else(|| {
                        Error::State(format!("layer {idx} has no row assignment"))
                    })?;
                    let (w, m) = fake_quant_weights(layer, assignment)?;
                    (w, Some(m))
                } else {
                    (weight.clone(), None)
                };
                let bias_used = if qat && model.bias_quant {
                    fake_quant_bias(bias)
                } else {
                    bias.clone()
                };
                let y = dense_forward(&x, &w_used, &bias_used.data);
                steps.push(TraceStep::Dense {
                    layer: idx,
                    input: x,
                    w_used,
                    w_mask,
                });
                x = y;
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                if x.rank() != 4 || x.shape[1] != weight.shape[1] {
                    return Err(Error::Shape(format!(
                        "conv layer {idx} expects [batch, {}, h, w], got {:?}",
                        weight.shape[1], x.shape
                    )));
                }
                let (b, in_c, in_h, in_w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oc, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
                let (out_h, out_w, map) = im2col_map(in_c, in_h, in_w, kh, kw, *stride, *padding)?;
                let k = in_c * kh * kw;
                let p = out_h * out_w;
                let (w_used, w_mask) = if qat {
                    let assignment = model.assignments[idx].as_ref().ok_or_else(|| {
                        Error::State(format!("layer {idx} has no row assignment"))
                    })?;
                    let (w, m) = fake_quant_weights(layer, assignment)?;
                    (w, Some(m))
                } else {
                    (weight.clone(), None)
                };
                let bias_used = if qat && model.bias_quant {
                    fake_quant_bias(bias)
                } else {
                    bias.clone()
                };

                let mut cols = vec![0f32; b * k * p];
                for bi in 0..b {
                    let sample = x.sample(bi);
                    let dst = &mut cols[bi * k * p..(bi + 1) * k * p];
                    for (slot, &src) in dst.iter_mut().zip(&map) {
                        *slot = if src >= 0 { sample[src as usize] } else { 0.0 };
                    }
                }
                let mut y = vec![0f32; b * oc * p];
                for bi in 0..b {
                    let cb = &cols[bi * k * p..(bi + 1) * k * p];
                    let yb = &mut y[bi * oc * p..(bi + 1) * oc * p];
                    for r in 0..oc {
                        let wr = &w_used.data[r * k..(r + 1) * k];
                        for pi in 0..p {
                            let mut acc = bias_used.data[r] as f64;
                            for ki in 0..k {
                                acc += wr[ki] as f64 * cb[ki * p + pi] as f64;
                            }
                            yb[r * p + pi] = acc as f32;
                        }
                    }
                }
                steps.push(TraceStep::Conv {
                    layer: idx,
                    in_shape: x.shape.clone(),
                    cols,
                    k,
                    p,
                    map,
                    w_used,
                    w_mask,
                });
                x = Tensor {
                    shape: vec![b, oc, out_h, out_w],
                    data: y,
                };
            }
            Layer::Relu => {
                let mut mask = Vec::with_capacity(x.data.len());
                for v in x.data.iter_mut() {
                    mask.push(if *v > 0.0 { 1.0 } else { 0.0 });
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                steps.push(TraceStep::Relu { mask });
            }
            Layer::MaxPool2d { kernel, stride } => {
                if x.rank() != 4 {
                    return Err(Error::Shape(format!("maxpool expects rank-4 input, got {:?}", x.shape)));
                }
                let (b, c, in_h, in_w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (out_h, out_w) = pool_geometry(in_h, in_w, *kernel, *stride)?;
                let mut y = vec![0f32; b * c * out_h * out_w];
                let mut argmax = vec![0usize; y.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &x.data[(bi * c + ci) * in_h * in_w..];
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let mut best = f32::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for dy in 0..*kernel {
                                    for dx in 0..*kernel {
                                        let iy = oy * stride + dy;
                                        let ix = ox * stride + dx;
                                        let i = iy * in_w + ix;
                                        if plane[i] > best {
                                            best = plane[i];
                                            best_idx = i;
                                        }
                                    }
                                }
                                let o = ((bi * c + ci) * out_h + oy) * out_w + ox;
                                y[o] = best;
                                argmax[o] = (bi * c + ci) * in_h * in_w + best_idx;
                            }
                        }
                    }
                }
                steps.push(TraceStep::MaxPool {
                    in_shape: x.shape.clone(),
                    argmax,
                });
                x = Tensor {
                    shape: vec![b, c, out_h, out_w],
                    data: y,
                };
            }
            Layer::AvgPool2d { kernel, stride } => {
                if x.rank() != 4 {
                    return Err(Error::Shape(format!("avgpool expects rank-4 input, got {:?}", x.shape)));
                }
                let (b, c, in_h, in_w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (out_h, out_w) = pool_geometry(in_h, in_w, *kernel, *stride)?;
                let inv = 1.0 / (*kernel * *kernel) as f32;
                let mut y = vec![0f32; b * c * out_h * out_w];
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &x.data[(bi * c + ci) * in_h * in_w..];
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let mut acc = 0f32;
                                for dy in 0..*kernel {
                                    for dx in 0..*kernel {
                                        acc += plane[(oy * stride + dy) * in_w + (ox * stride + dx)];
                                    }
                                }
                                y[((bi * c + ci) * out_h + oy) * out_w + ox] = acc * inv;
                            }
                        }
                    }
                }
                steps.push(TraceStep::AvgPool {
                    layer: idx,
                    in_shape: x.shape.clone(),
                });
                x = Tensor {
                    shape: vec![b, c, out_h, out_w],
                    data: y,
                };
            }
            Layer::Flatten => {
                let b = x.batch();
                let rest = x.sample_numel();
                steps.push(TraceStep::Flatten {
                    in_shape: x.shape.clone(),
                });
                x = x.reshape(vec![b, rest])?;
            }
        }

        // Activation quantization points: after a relu, or after a weighted
        // layer not immediately followed by one — but only while another
        // weighted layer is still downstream (logits stay real).
        if qat {
            let next_is_relu = matches!(model.layers.get(idx + 1), Some(Layer::Relu));
            let is_point = match layer {
                Layer::Relu => true,
                l if l.is_weighted() => !next_is_relu,
                _ => false,
            };
            if is_point && model.has_weighted_after(idx) {
                let (q, mask) = act_quantize(&x, &model.act_quant);
                x = q;
                steps.push(TraceStep::ActQuant { mask });
            }
        }
    }

    Ok(ForwardTrace { steps, output: x })
}

fn dense_forward(x: &Tensor, w: &Tensor, bias: &[f32]) -> Tensor {
    let (b, n_in) = (x.shape[0], x.shape[1]);
    let n_out = w.shape[0];
    let mut y = vec![0f32; b * n_out];
    for bi in 0..b {
        let xb = &x.data[bi * n_in..(bi + 1) * n_in];
        for r in 0..n_out {
            let wr = &w.data[r * n_in..(r + 1) * n_in];
            let mut acc = bias[r] as f64;
            for i in 0..n_in {
                acc += wr[i] as f64 * xb[i] as f64;
            }
            y[bi * n_out + r] = acc as f32;
        }
    }
    Tensor {
        shape: vec![b, n_out],
        data: y,
    }
}

/// Reverse-mode pass over a recorded trace. `loss_grad` is dL/d(output).
///
/// Quantizer nodes apply their straight-through masks; all other ops use
/// exact reverse rules. Returns per-layer weight and bias gradients.
pub fn backward_ste(model: &Model, trace: &ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
    if loss_grad.shape != trace.output.shape {
        return Err(Error::Shape(format!(
            "loss gradient shape {:?} does not match output {:?}",
            loss_grad.shape, trace.output.shape
        )));
    }
    let mut grads: Vec<Option<LayerGrads>> = model.layers.iter().map(|_| None).collect();
    let mut g = loss_grad.clone();

    for step in trace.steps.iter().rev() {
        match step {
            TraceStep::ActQuant { mask } | TraceStep::Relu { mask } => {
                for (gv, m) in g.data.iter_mut().zip(mask) {
                    *gv *= m;
                }
            }
            TraceStep::Dense {
                layer,
                input,
                w_used,
                w_mask,
            } => {
                let (b, n_in) = (input.shape[0], input.shape[1]);
                let n_out = w_used.shape[0];
                let mut dw = vec![0f32; n_out * n_in];
                let mut db = vec![0f32; n_out];
                for r in 0..n_out {
                    let mut db_acc = 0f64;
                    for bi in 0..b {
                        db_acc += g.data[bi * n_out + r] as f64;
                    }
                    db[r] = db_acc as f32;
                    for i in 0..n_in {
                        let mut acc = 0f64;
                        for bi in 0..b {
                            acc += g.data[bi * n_out + r] as f64 * input.data[bi * n_in + i] as f64;
                        }
                        dw[r * n_in + i] = acc as f32;
                    }
                }
                if let Some(mask) = w_mask {
                    for (d, m) in dw.iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                let mut gx = vec![0f32; b * n_in];
                for bi in 0..b {
                    for i in 0..n_in {
                        let mut acc = 0f64;
                        for r in 0..n_out {
                            acc += g.data[bi * n_out + r] as f64 * w_used.data[r * n_in + i] as f64;
                        }
                        gx[bi * n_in + i] = acc as f32;
                    }
                }
                grads[*layer] = Some(LayerGrads {
                    dw: Tensor {
                        shape: w_used.shape.clone(),
                        data: dw,
                    },
                    db: Tensor {
                        shape: vec![n_out],
                        data: db,
                    },
                });
                g = Tensor {
                    shape: input.shape.clone(),
                    data: gx,
                };
            }
            TraceStep::Conv {
                layer,
                in_shape,
                cols,
                k,
                p,
                map,
                w_used,
                w_mask,
            } => {
                let b = in_shape[0];
                let oc = w_used.shape[0];
                let (k, p) = (*k, *p);
                let mut dw = vec![0f64; oc * k];
                let mut db = vec![0f64; oc];
                let mut gx = vec![0f32; in_shape.iter().product()];
                let sample_numel: usize = in_shape.iter().skip(1).product();
                for bi in 0..b {
                    let gb = &g.data[bi * oc * p..(bi + 1) * oc * p];
                    let cb = &cols[bi * k * p..(bi + 1) * k * p];
                    for r in 0..oc {
                        let gr = &gb[r * p..(r + 1) * p];
                        db[r] += gr.iter().map(|&v| v as f64).sum::<f64>();
                        for ki in 0..k {
                            let mut acc = 0f64;
                            let cbk = &cb[ki * p..(ki + 1) * p];
                            for pi in 0..p {
                                acc += gr[pi] as f64 * cbk[pi] as f64;
                            }
                            dw[r * k + ki] += acc;
                        }
                    }
                    // dcols = Wᵀ·dY, scattered back through the im2col map
                    let gx_b = &mut gx[bi * sample_numel..(bi + 1) * sample_numel];
                    for ki in 0..k {
                        for pi in 0..p {
                            let src = map[ki * p + pi];
                            if src < 0 {
                                continue;
                            }
                            let mut acc = 0f64;
                            for r in 0..oc {
                                acc += w_used.data[r * k + ki] as f64 * gb[r * p + pi] as f64;
                            }
                            gx_b[src as usize] += acc as f32;
                        }
                    }
                }
                let mut dw32: Vec<f32> = dw.iter().map(|&d| d as f32).collect();
                if let Some(mask) = w_mask {
                    for (d, m) in dw32.iter_mut().zip(mask) {
                        *d *= m;
                    }
                }
                grads[*layer] = Some(LayerGrads {
                    dw: Tensor {
                        shape: w_used.shape.clone(),
                        data: dw32,
                    },
                    db: Tensor {
                        shape: vec![oc],
                        data: db.iter().map(|&d| d as f32).collect(),
                    },
                });
                g = Tensor {
                    shape: in_shape.clone(),
                    data: gx,
                };
            }
            TraceStep::MaxPool { in_shape, argmax } => {
                let mut gx = vec![0f32; in_shape.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data[o];
                }
                g = Tensor {
                    shape: in_shape.clone(),
                    data: gx,
                };
            }
            TraceStep::AvgPool { layer, in_shape } => {
                let (kernel, stride) = match &model.layers[*layer] {
                    Layer::AvgPool2d { kernel, stride } => (*kernel, *stride),
                    _ => unreachable!(),
                };
                let (b, c, in_h, in_w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let (out_h, out_w) = pool_geometry(in_h, in_w, kernel, stride)?;
                let inv = 1.0 / (kernel * kernel) as f32;
                let mut gx = vec![0f32; in_shape.iter().product()];
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let go = g.data[((bi * c + ci) * out_h + oy) * out_w + ox] * inv;
                                for dy in 0..kernel {
                                    for dx in 0..kernel {
                                        gx[(bi * c + ci) * in_h * in_w
                                            + (oy * stride + dy) * in_w
                                            + (ox * stride + dx)] += go;
                                    }
                                }
                            }
                        }
                    }
                }
                g = Tensor {
                    shape: in_shape.clone(),
                    data: gx,
                };
            }
            TraceStep::Flatten { in_shape } => {
                g = Tensor {
                    shape: in_shape.clone(),
                    data: std::mem::take(&mut g.data),
                };
            }
        }
    }
    Ok(Gradients { by_layer: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{RowAssignment, RowPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, span: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.gen_range(-span..span)).collect(),
        }
    }

    /// Scalar loss: fixed random linear functional of the logits, so the
    /// analytic dL/d(output) is just the coefficient vector.
    fn linear_loss(out: &Tensor, coeffs: &[f32]) -> f32 {
        out.data.iter().zip(coeffs).map(|(a, b)| a * b).sum()
    }

    fn finite_diff_param_grad(
        model: &Model,
        input: &Tensor,
        coeffs: &[f32],
        layer: usize,
        elem: usize,
        eps: f32,
    ) -> f32 {
        let mut plus = model.clone();
        let mut minus = model.clone();
        match (&mut plus.layers[layer], &mut minus.layers[layer]) {
            (
                Layer::Dense { weight: wp, .. } | Layer::Conv2d { weight: wp, .. },
                Layer::Dense { weight: wm, .. } | Layer::Conv2d { weight: wm, .. },
            ) => {
                wp.data[elem] += eps;
                wm.data[elem] -= eps;
            }
            _ => unreachable!(),
        }
        let fp = linear_loss(&forward(&plus, input, Mode::Float).unwrap(), coeffs);
        let fm = linear_loss(&forward(&minus, input, Mode::Float).unwrap(), coeffs);
        (fp - fm) / (2.0 * eps)
    }

    fn check_param_grads(model: &Model, input: &Tensor, seed: u64) {
        let mut r = rng(seed);
        let trace = forward_trace(model, input, Mode::Float).unwrap();
        let coeffs: Vec<f32> = (0..trace.output.numel()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let loss_grad = Tensor {
            shape: trace.output.shape.clone(),
            data: coeffs.clone(),
        };
        let grads = backward_ste(model, &trace, &loss_grad).unwrap();
        for (li, layer) in model.layers.iter().enumerate() {
            if !layer.is_weighted() {
                continue;
            }
            let lg = grads.by_layer[li].as_ref().unwrap();
            let n = lg.dw.numel();
            // probe a deterministic subset of weights
            for elem in (0..n).step_by(1 + n / 17) {
                let analytic = lg.dw.data[elem];
                let numeric = finite_diff_param_grad(model, input, &coeffs, li, elem, 1e-2);
                let denom = analytic.abs().max(numeric.abs()).max(1e-2);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-3,
                    "layer {li} elem {elem}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut r = rng(1);
        let model = Model::new(vec![
            Layer::Dense {
                weight: random_tensor(&mut r, vec![5, 4], 0.8),
                bias: random_tensor(&mut r, vec![5], 0.5),
            },
            Layer::Relu,
            Layer::Dense {
                weight: random_tensor(&mut r, vec![3, 5], 0.8),
                bias: random_tensor(&mut r, vec![3], 0.5),
            },
        ]);
        let input = random_tensor(&mut r, vec![4, 4], 1.0);
        check_param_grads(&model, &input, 2);
    }

    #[test]
    fn conv_pool_gradients_match_finite_differences() {
        let mut r = rng(3);
        let model = Model::new(vec![
            Layer::Conv2d {
                weight: random_tensor(&mut r, vec![3, 2, 3, 3], 0.5),
                bias: random_tensor(&mut r, vec![3], 0.3),
                stride: 1,
                padding: 1,
            },
            Layer::Relu,
            Layer::MaxPool2d { kernel: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense {
                weight: random_tensor(&mut r, vec![4, 3 * 3 * 3], 0.4),
                bias: random_tensor(&mut r, vec![4], 0.2),
            },
        ]);
        let input = random_tensor(&mut r, vec![2, 2, 6, 6], 1.0);
        check_param_grads(&model, &input, 4);
    }

    #[test]
    fn avgpool_gradients_match_finite_differences() {
        let mut r = rng(5);
        let model = Model::new(vec![
            Layer::Conv2d {
                weight: random_tensor(&mut r, vec![2, 1, 3, 3], 0.5),
                bias: random_tensor(&mut r, vec![2], 0.2),
                stride: 1,
                padding: 0,
            },
            Layer::AvgPool2d { kernel: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense {
                weight: random_tensor(&mut r, vec![3, 2 * 2 * 2], 0.4),
                bias: random_tensor(&mut r, vec![3], 0.2),
            },
        ]);
        let input = random_tensor(&mut r, vec![2, 1, 6, 6], 1.0);
        check_param_grads(&model, &input, 6);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let mut r = rng(7);
        let mut model = Model::new(vec![
            Layer::Dense {
                weight: random_tensor(&mut r, vec![6, 4], 1.0),
                bias: Tensor::zeros(vec![6]),
            },
            Layer::Relu,
            Layer::Dense {
                weight: random_tensor(&mut r, vec![3, 6], 1.0),
                bias: Tensor::zeros(vec![3]),
            },
        ]);
        model.assignments = vec![
            Some(RowAssignment { rows: vec![RowPlan::FIXED4; 6] }),
            None,
            Some(RowAssignment { rows: vec![RowPlan::POT4; 3] }),
        ];
        let input = Tensor::zeros(vec![2, 4]);
        for mode in [Mode::Float, Mode::Qat] {
            let out = forward(&model, &input, mode).unwrap();
            assert!(out.data.iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn qat_equals_float_when_weights_and_inputs_sit_on_grid() {
        // Single dense layer: logits are never requantized, so on-grid
        // weights and inputs make the two modes bitwise identical.
        let act = ActQuantSpec::default();
        let step = act.step();
        let w_scale = 0.02f32;
        let mut model = Model::new(vec![Layer::Dense {
            weight: Tensor {
                shape: vec![2, 3],
                // row max magnitude 7·scale keeps the auto-computed scale at w_scale
                data: vec![
                    7.0 * w_scale,
                    -3.0 * w_scale,
                    1.0 * w_scale,
                    2.0 * w_scale,
                    -7.0 * w_scale,
                    5.0 * w_scale,
                ],
            },
            bias: Tensor {
                shape: vec![2],
                data: vec![0.25, -0.5],
            },
        }]);
        model.assignments = vec![Some(RowAssignment { rows: vec![RowPlan::FIXED4; 2] })];
        let input = Tensor {
            shape: vec![1, 3],
            data: vec![step, 2.0 * step, -3.0 * step],
        };
        let float = forward(&model, &input, Mode::Float).unwrap();
        let qat = forward(&model, &input, Mode::Qat).unwrap();
        assert_eq!(float.data, qat.data);
    }

    #[test]
    fn qat_forward_matches_hand_computation() {
        // 2x2 dense toy: row 0 Fixed-4 (scale 0.6/7), row 1 PoT-4 (scale 0.9);
        // input [1, 2] quantizes to codes [1, 2] on the 6/7 activation grid.
        let mut model = Model::new(vec![Layer::Dense {
            weight: Tensor {
                shape: vec![2, 2],
                data: vec![0.3, -0.6, 0.9, 0.15],
            },
            bias: Tensor::zeros(vec![2]),
        }]);
        model.assignments = vec![Some(RowAssignment {
            rows: vec![RowPlan::FIXED4, RowPlan::POT4],
        })];
        let input = Tensor {
            shape: vec![1, 2],
            data: vec![1.0, 2.0],
        };
        let out = forward(&model, &input, Mode::Qat).unwrap();
        // x̂ = [6/7, 12/7]; ŵ row0 = [4·0.6/7, -0.6]; ŵ row1 = [0.9, 0.1125]
        // y0 = (2.4/7)(6/7) - 0.6(12/7) = -0.7346939
        // y1 = 0.9(6/7) + 0.1125(12/7) = 0.9642857
        assert!((out.data[0] - (-0.7346939)).abs() < 1e-5, "{}", out.data[0]);
        assert!((out.data[1] - 0.9642857).abs() < 1e-5, "{}", out.data[1]);
    }

    #[test]
    fn qat_forward_without_assignment_is_a_state_error() {
        let model = Model::new(vec![Layer::Dense {
            weight: Tensor::zeros(vec![2, 2]),
            bias: Tensor::zeros(vec![2]),
        }]);
        let input = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            forward(&model, &input, Mode::Qat),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn ste_blocks_gradient_outside_clip_range() {
        // Weight quantized under an explicit narrow config: a weight far
        // outside the representable range saturates, so its gradient is zero.
        let layer = Layer::Dense {
            weight: Tensor {
                shape: vec![1, 2],
                data: vec![0.5, 40.0],
            },
            bias: Tensor::zeros(vec![1]),
        };
        let assignment = RowAssignment { rows: vec![RowPlan::FIXED4] };
        // auto row scale = 40/7, so 0.5 rounds inside the grid and passes
        let (_, mask) = fake_quant_weights(&layer, &assignment).unwrap();
        assert_eq!(mask, vec![1.0, 1.0]);

        // with a hand-built config the mask logic is visible directly: scale
        // chosen so 40.0 saturates
        let cfg = QuantConfig::new(QuantScheme::Fixed, 4, 1.0).unwrap();
        let code = quant::fixed_quantize(40.0, &cfg).unwrap();
        assert_eq!(code, 7); // saturated
        assert!((40.0f32 / cfg.scale).round().abs() > cfg.qmax() as f32);

        // activation STE: out-of-clip inputs get a zero mask
        let spec = ActQuantSpec { bits: 4, clip: 1.0 };
        let x = Tensor {
            shape: vec![1, 3],
            data: vec![0.5, -2.0, 1.0],
        };
        let (_, mask) = act_quantize(&x, &spec);
        assert_eq!(mask, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_dense_gradient_is_outer_product_under_ste() {
        // loss = sum(logits) for one dense layer: dL/dW = outer(1, x).
        let mut model = Model::new(vec![Layer::Dense {
            weight: Tensor {
                shape: vec![2, 3],
                data: vec![0.05, -0.02, 0.01, 0.03, 0.04, -0.05],
            },
            bias: Tensor::zeros(vec![2]),
        }]);
        model.assignments = vec![Some(RowAssignment { rows: vec![RowPlan::FIXED4; 2] })];
        let input = Tensor {
            shape: vec![1, 3],
            data: vec![0.857143, 1.714286, -0.857143], // on the activation grid
        };
        let trace = forward_trace(&model, &input, Mode::Qat).unwrap();
        let ones = Tensor {
            shape: vec![1, 2],
            data: vec![1.0, 1.0],
        };
        let grads = backward_ste(&model, &trace, &ones).unwrap();
        let lg = grads.by_layer[0].as_ref().unwrap();
        for r in 0..2 {
            for i in 0..3 {
                let got = lg.dw.data[r * 3 + i];
                let want = input.data[i]; // the quantized input equals the input here
                assert!((got - want).abs() < 2e-6, "dw[{r}][{i}] {got} vs {want}");
            }
        }
        assert_eq!(lg.db.data, vec![1.0, 1.0]);
    }
}
