//! Bit-exact integer inference mirroring the dual-engine FPGA split.
//!
//! PoT rows are computed by `gemm_pot`, a shift-add kernel that never
//! multiplies: a weight level `2^-k` contributes `act << (6 - k)`, so the
//! accumulator carries a fixed `2^6` pre-scale that is folded into the
//! output rescale. Fixed rows go through `gemm_fixed`, a plain integer
//! multiply kernel. Both accumulate exactly in 64 bits; rescaling to a
//! common real scale, bias, activation, and requantization happen once per
//! layer, after which the next layer again sees pure integer codes.

use crate::assignment::RowAssignment;
use crate::error::{Error, Result};
use crate::nn::{self, ActQuantSpec, Layer, Model};
use crate::quant::{
    self, QuantizedRow, QuantScheme, POT_PRESCALE_SHIFT, POT_ZERO_FIELD,
};
use crate::tensor::Tensor;

/// Largest inner (dot-product) dimension the kernels accept.
pub const MAX_INNER_DIM: usize = 65536;
/// Largest activation bit-width the kernels accept (pool sums can grow past
/// the nominal 4/8 bits).
pub const MAX_ACT_BITS: u8 = 16;

// Worst-case accumulators stay far inside i64: 8-bit weight codes times
// 16-bit activation codes over the full inner dimension, and the shifted
// PoT path with its 2^6 pre-scale.
const _: () = assert!(127 * 32767 * (MAX_INNER_DIM as i64) < i64::MAX / 4);
const _: () = assert!((32767i64 << POT_PRESCALE_SHIFT) * (MAX_INNER_DIM as i64) < i64::MAX / 4);

/// Integer activation tensor: codes with a shared positive scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IntActivation {
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
    pub bits: u8,
    pub scale: f32,
}

impl IntActivation {
    pub fn validate(&self) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        if numel != self.codes.len() {
            return Err(Error::Shape(format!(
                "activation shape {:?} vs {} codes",
                self.shape,
                self.codes.len()
            )));
        }
        if self.bits == 0 || self.bits > MAX_ACT_BITS {
            return Err(Error::Contract(format!("activation bits {} out of range", self.bits)));
        }
        let bound = (1i64 << (self.bits - 1)) - 1;
        if let Some(&c) = self.codes.iter().find(|&&c| (c as i64).abs() > bound) {
            return Err(Error::Contract(format!(
                "activation code {c} exceeds ±{bound} for {} bits",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_numel(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Real values represented by the codes.
    pub fn dequantize(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.codes.iter().map(|&c| c as f32 * self.scale).collect(),
        }
    }
}

/// Arithmetic-operation tally for one kernel invocation or one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Nominal multiply-accumulates (rows × inner), independent of skips.
    pub macs: u64,
    /// General multiplies actually issued (zero inside `gemm_pot`).
    pub mults: u64,
    pub adds: u64,
    pub shifts: u64,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.macs += other.macs;
        self.mults += other.mults;
        self.adds += other.adds;
        self.shifts += other.shifts;
    }
}

fn check_gemm_dims(rows: &[&QuantizedRow], act: &[i32], act_bits: u8) -> Result<()> {
    if act.len() > MAX_INNER_DIM {
        return Err(Error::Contract(format!(
            "inner dimension {} exceeds {MAX_INNER_DIM}",
            act.len()
        )));
    }
    if act_bits == 0 || act_bits > MAX_ACT_BITS {
        return Err(Error::Contract(format!("activation bits {act_bits} out of range")));
    }
    for row in rows {
        if row.codes.len() != act.len() {
            return Err(Error::Contract(format!(
                "row length {} vs activation length {}",
                row.codes.len(),
                act.len()
            )));
        }
    }
    Ok(())
}

/// Integer multiply kernel for fixed-scheme rows:
/// `acc[r] = Σ_j code[r][j] · act[j]`, exact in 64 bits.
pub fn gemm_fixed(
    rows: &[&QuantizedRow],
    act: &IntActivation,
    counters: &mut OpCounters,
) -> Result<Vec<i64>> {
    act.validate()?;
    gemm_fixed_codes(rows, &act.codes, act.bits, counters)
}

fn gemm_fixed_codes(
    rows: &[&QuantizedRow],
    act: &[i32],
    act_bits: u8,
    counters: &mut OpCounters,
) -> Result<Vec<i64>> {
    check_gemm_dims(rows, act, act_bits)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.config.scheme != QuantScheme::Fixed {
            return Err(Error::Contract("gemm_fixed got a non-fixed row".into()));
        }
        let mut acc = 0i64;
        for (&code, &a) in row.codes.iter().zip(act) {
            acc += code as i64 * a as i64;
        }
        counters.macs += row.codes.len() as u64;
        counters.mults += row.codes.len() as u64;
        counters.adds += row.codes.len() as u64;
        out.push(acc);
    }
    Ok(out)
}

/// Shift-add kernel for PoT rows, pre-scaled by `2^6`:
/// `acc[r] = Σ_j sign · (act[j] << (6 - k[r][j]))`, zero-sentinel terms
/// skipped. Uses only shifts, adds, and negation — no general multiply.
pub fn gemm_pot(
    rows: &[&QuantizedRow],
    act: &IntActivation,
    counters: &mut OpCounters,
) -> Result<Vec<i64>> {
    act.validate()?;
    gemm_pot_codes(rows, &act.codes, act.bits, counters)
}

fn gemm_pot_codes(
    rows: &[&QuantizedRow],
    act: &[i32],
    act_bits: u8,
    counters: &mut OpCounters,
) -> Result<Vec<i64>> {
    check_gemm_dims(rows, act, act_bits)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.config.scheme != QuantScheme::PoT {
            return Err(Error::Contract("gemm_pot got a non-PoT row".into()));
        }
        let mut acc = 0i64;
        for (&code, &a) in row.codes.iter().zip(act) {
            let (neg, field) = quant::pot_unpack(code);
            if field == POT_ZERO_FIELD {
                continue;
            }
            if field > quant::POT_MAX_EXPONENT {
                return Err(Error::Contract(format!("PoT exponent field {field} out of range")));
            }
            let term = (a as i64) << (POT_PRESCALE_SHIFT - field as u32);
            counters.shifts += 1;
            counters.adds += 1;
            acc += if neg { -term } else { term };
        }
        counters.macs += row.codes.len() as u64;
        out.push(acc);
    }
    Ok(out)
}

/// One quantized weighted layer: rows in original order (each row's config
/// carries its scheme, bits, and scale), real bias, an optional fused relu,
/// and the output requantizer (absent on the last weighted layer, whose
/// outputs stay real).
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub rows: Vec<QuantizedRow>,
    pub bias: Vec<f32>,
    pub fused_relu: bool,
    pub requant: Option<ActQuantSpec>,
}

impl QuantizedLayer {
    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn in_dim(&self) -> usize {
        self.rows.first().map(|r| r.codes.len()).unwrap_or(0)
    }

    pub fn assignment(&self) -> RowAssignment {
        RowAssignment {
            rows: self
                .rows
                .iter()
                .map(|r| crate::assignment::RowPlan {
                    scheme: r.config.scheme,
                    bits: r.config.bits,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub enum QNode {
    Dense(QuantizedLayer),
    Conv(QuantizedLayer, ConvMeta),
    Relu { requant: Option<ActQuantSpec> },
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    Flatten,
}

impl QNode {
    pub fn kind_name(&self) -> &'static str {
        match self {
            QNode::Dense(_) => "dense",
            QNode::Conv(..) => "conv2d",
            QNode::Relu { .. } => "relu",
            QNode::MaxPool { .. } => "maxpool",
            QNode::AvgPool { .. } => "avgpool",
            QNode::Flatten => "flatten",
        }
    }
}

/// A fully quantized model ready for integer inference.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub input_quant: ActQuantSpec,
    pub nodes: Vec<QNode>,
}

/// Converts a trained, fully assigned model into integer form. Row scales
/// follow the row-scale rule on the latent weights; relu layers directly
/// after a weighted layer are fused into it; requantizers are placed
/// exactly where the QAT forward placed its activation quantizers.
pub fn quantize_model(model: &Model) -> Result<QuantizedModel> {
    if !model.fully_assigned() {
        return Err(Error::State(
            "model has unassigned weighted layers; run assignment (or QAT) first".into(),
        ));
    }
    model.act_quant.validate()?;
    let mut nodes = Vec::new();
    let mut i = 0usize;
    while i < model.layers.len() {
        let layer = &model.layers[i];
        match layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => {
                let assignment = model.assignments[i].as_ref().unwrap();
                let rows_n = layer.rows().unwrap();
                if assignment.rows.len() != rows_n {
                    return Err(Error::Contract(format!(
                        "assignment covers {} rows, layer {i} has {rows_n}",
                        assignment.rows.len()
                    )));
                }
                let mut rows = Vec::with_capacity(rows_n);
                for r in 0..rows_n {
                    let plan = assignment.rows[r];
                    rows.push(quant::quantize_row_auto(
                        layer.row_weights(r),
                        plan.scheme,
                        plan.bits,
                    )?);
                }
                let bias_t = layer.bias().unwrap();
                let bias = if model.bias_quant {
                    nn::fake_quant_bias_values(bias_t)
                } else {
                    bias_t.data.clone()
                };
                let fused_relu = matches!(model.layers.get(i + 1), Some(Layer::Relu));
                let end = if fused_relu { i + 1 } else { i };
                let requant = model
                    .has_weighted_after(end)
                    .then_some(model.act_quant);
                let q = QuantizedLayer {
                    rows,
                    bias,
                    fused_relu,
                    requant,
                };
                match layer {
                    Layer::Dense { .. } => nodes.push(QNode::Dense(q)),
                    Layer::Conv2d { weight, stride, padding, .. } => nodes.push(QNode::Conv(
                        q,
                        ConvMeta {
                            in_c: weight.shape[1],
                            kh: weight.shape[2],
                            kw: weight.shape[3],
                            stride: *stride,
                            padding: *padding,
                        },
                    )),
                    _ => unreachable!(),
                }
                i = end + 1;
            }
            Layer::Relu => {
                let requant = model.has_weighted_after(i).then_some(model.act_quant);
                nodes.push(QNode::Relu { requant });
                i += 1;
            }
            Layer::MaxPool2d { kernel, stride } => {
                nodes.push(QNode::MaxPool { kernel: *kernel, stride: *stride });
                i += 1;
            }
            Layer::AvgPool2d { kernel, stride } => {
                nodes.push(QNode::AvgPool { kernel: *kernel, stride: *stride });
                i += 1;
            }
            Layer::Flatten => {
                nodes.push(QNode::Flatten);
                i += 1;
            }
        }
    }
    Ok(QuantizedModel {
        input_quant: model.act_quant,
        nodes,
    })
}

/// Quantizes a real tensor onto the activation grid.
pub fn quantize_input(x: &Tensor, spec: &ActQuantSpec) -> IntActivation {
    let step = spec.step();
    let clip = spec.clip;
    IntActivation {
        codes: x
            .data
            .iter()
            .map(|&v| (v.clamp(-clip, clip) / step).round() as i32)
            .collect(),
        shape: x.shape.clone(),
        bits: spec.bits,
        scale: step,
    }
}

fn requantize(values: &[f64], spec: &ActQuantSpec) -> Vec<i32> {
    let step = spec.step() as f64;
    let qmax = spec.qmax() as i64;
    values
        .iter()
        .map(|&v| ((v / step).round() as i64).clamp(-qmax, qmax) as i32)
        .collect()
}

/// Rescaled real outputs of one weighted layer for one activation vector:
/// partition by scheme, run both kernels, bring accumulators to the common
/// real scale, add bias, and apply the fused relu if present.
fn layer_real_output(
    layer: &QuantizedLayer,
    act: &[i32],
    act_bits: u8,
    act_scale: f32,
    counters: &mut OpCounters,
) -> Result<Vec<f64>> {
    let mut pot_rows = Vec::new();
    let mut pot_idx = Vec::new();
    let mut fixed_rows = Vec::new();
    let mut fixed_idx = Vec::new();
    for (r, row) in layer.rows.iter().enumerate() {
        match row.config.scheme {
            QuantScheme::PoT => {
                pot_rows.push(row);
                pot_idx.push(r);
            }
            QuantScheme::Fixed => {
                fixed_rows.push(row);
                fixed_idx.push(r);
            }
        }
    }
    let pot_acc = gemm_pot_codes(&pot_rows, act, act_bits, counters)?;
    let fixed_acc = gemm_fixed_codes(&fixed_rows, act, act_bits, counters)?;

    let mut out = vec![0f64; layer.rows.len()];
    let prescale = (1u64 << POT_PRESCALE_SHIFT) as f64;
    for (slot, acc) in pot_idx.iter().zip(&pot_acc) {
        let row_scale = layer.rows[*slot].config.scale as f64;
        out[*slot] = *acc as f64 * row_scale * act_scale as f64 / prescale + layer.bias[*slot] as f64;
    }
    for (slot, acc) in fixed_idx.iter().zip(&fixed_acc) {
        let row_scale = layer.rows[*slot].config.scale as f64;
        out[*slot] = *acc as f64 * row_scale * act_scale as f64 + layer.bias[*slot] as f64;
    }
    if layer.fused_relu {
        for v in out.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Integer-in, integer-out inference for one dense quantized layer over a
/// `[batch, in]` (or `[in]`) activation. Requires the layer to carry
/// requantization parameters; the final layer of a network does not, and is
/// handled by [`infer`], which dequantizes its accumulators instead.
pub fn infer_layer(
    layer: &QuantizedLayer,
    act: &IntActivation,
    counters: &mut OpCounters,
) -> Result<IntActivation> {
    act.validate()?;
    let spec = layer.requant.ok_or_else(|| {
        Error::State("infer_layer needs requantization parameters; the final layer keeps real outputs".into())
    })?;
    let (batch, in_dim) = match act.shape.len() {
        1 => (1usize, act.shape[0]),
        2 => (act.shape[0], act.shape[1]),
        _ => {
            return Err(Error::Shape(format!(
                "dense layer expects a vector or [batch, in] activation, got {:?}",
                act.shape
            )))
        }
    };
    if in_dim != layer.in_dim() {
        return Err(Error::Shape(format!(
            "activation width {in_dim} vs layer input {}",
            layer.in_dim()
        )));
    }
    let out_dim = layer.out_dim();
    let mut codes = Vec::with_capacity(batch * out_dim);
    for b in 0..batch {
        let sample = &act.codes[b * in_dim..(b + 1) * in_dim];
        let real = layer_real_output(layer, sample, act.bits, act.scale, counters)?;
        codes.extend(requantize(&real, &spec));
    }
    let shape = if act.shape.len() == 1 {
        vec![out_dim]
    } else {
        vec![batch, out_dim]
    };
    Ok(IntActivation {
        codes,
        shape,
        bits: spec.bits,
        scale: spec.step(),
    })
}

enum Flow {
    Int(IntActivation),
    Real(Tensor),
}

/// End-to-end integer inference: quantizes the input once, chains the
/// nodes, and returns real logits.
pub fn infer(model: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    infer_with_stats(model, input).map(|(t, _)| t)
}

/// [`infer`] plus per-node operation counts (shifts, adds, multiplies).
pub fn infer_with_stats(
    model: &QuantizedModel,
    input: &Tensor,
) -> Result<(Tensor, Vec<(String, OpCounters)>)> {
    if input.batch() == 0 {
        return Err(Error::Domain("empty input batch".into()));
    }
    let mut flow = Flow::Int(quantize_input(input, &model.input_quant));
    let mut stats = Vec::with_capacity(model.nodes.len());

    for (ni, node) in model.nodes.iter().enumerate() {
        let mut counters = OpCounters::default();
        flow = match node {
            QNode::Dense(layer) => {
                let act = match &flow {
                    Flow::Int(act) => act,
                    Flow::Real(_) => {
                        return Err(Error::State(format!(
                            "node {ni}: weighted layer after the real-valued tail"
                        )))
                    }
                };
                if layer.requant.is_some() {
                    Flow::Int(infer_layer(layer, act, &mut counters)?)
                } else {
                    // final weighted layer: dequantize accumulators to logits
                    act.validate()?;
                    let (batch, in_dim) = match act.shape.len() {
                        2 => (act.shape[0], act.shape[1]),
                        _ => {
                            return Err(Error::Shape(format!(
                                "dense layer expects [batch, in], got {:?}",
                                act.shape
                            )))
                        }
                    };
                    if in_dim != layer.in_dim() {
                        return Err(Error::Shape(format!(
                            "activation width {in_dim} vs layer input {}",
                            layer.in_dim()
                        )));
                    }
                    let out_dim = layer.out_dim();
                    let mut data = Vec::with_capacity(batch * out_dim);
                    for b in 0..batch {
                        let sample = &act.codes[b * in_dim..(b + 1) * in_dim];
                        let real = layer_real_output(layer, sample, act.bits, act.scale, &mut counters)?;
                        data.extend(real.iter().map(|&v| v as f32));
                    }
                    Flow::Real(Tensor {
                        shape: vec![batch, out_dim],
                        data,
                    })
                }
            }
            QNode::Conv(layer, meta) => {
                let act = match &flow {
                    Flow::Int(act) => act,
                    Flow::Real(_) => {
                        return Err(Error::State(format!(
                            "node {ni}: weighted layer after the real-valued tail"
                        )))
                    }
                };
                act.validate()?;
                if act.shape.len() != 4 || act.shape[1] != meta.in_c {
                    return Err(Error::Shape(format!(
                        "conv expects [batch, {}, h, w], got {:?}",
                        meta.in_c, act.shape
                    )));
                }
                let (b, _, in_h, in_w) = (act.shape[0], act.shape[1], act.shape[2], act.shape[3]);
                let (out_h, out_w, map) =
                    nn::im2col_map(meta.in_c, in_h, in_w, meta.kh, meta.kw, meta.stride, meta.padding)?;
                let k = meta.in_c * meta.kh * meta.kw;
                let p = out_h * out_w;
                let out_dim = layer.out_dim();
                if k != layer.in_dim() {
                    return Err(Error::Shape(format!(
                        "im2col width {k} vs layer input {}",
                        layer.in_dim()
                    )));
                }
                let sample_numel = act.sample_numel();
                // position-major patch buffer so each GEMM sees a contiguous vector
                let mut patch = vec![0i32; k];
                let mut int_codes = Vec::new();
                let mut real_data = Vec::new();
                for bi in 0..b {
                    let sample = &act.codes[bi * sample_numel..(bi + 1) * sample_numel];
                    let mut per_pos: Vec<Vec<f64>> = Vec::with_capacity(p);
                    for pi in 0..p {
                        for ki in 0..k {
                            let src = map[ki * p + pi];
                            patch[ki] = if src >= 0 { sample[src as usize] } else { 0 };
                        }
                        per_pos.push(layer_real_output(layer, &patch, act.bits, act.scale, &mut counters)?);
                    }
                    // emit in [oc, oh, ow] order
                    match layer.requant {
                        Some(spec) => {
                            for r in 0..out_dim {
                                let col: Vec<f64> = (0..p).map(|pi| per_pos[pi][r]).collect();
                                int_codes.extend(requantize(&col, &spec));
                            }
                        }
                        None => {
                            for r in 0..out_dim {
                                real_data.extend((0..p).map(|pi| per_pos[pi][r] as f32));
                            }
                        }
                    }
                }
                let shape = vec![b, out_dim, out_h, out_w];
                match layer.requant {
                    Some(spec) => Flow::Int(IntActivation {
                        codes: int_codes,
                        shape,
                        bits: spec.bits,
                        scale: spec.step(),
                    }),
                    None => Flow::Real(Tensor { shape, data: real_data }),
                }
            }
            QNode::Relu { requant } => match flow {
                Flow::Int(mut act) => {
                    for c in act.codes.iter_mut() {
                        if *c < 0 {
                            *c = 0;
                        }
                    }
                    match requant {
                        Some(spec) => {
                            let scale = act.scale as f64;
                            let real: Vec<f64> =
                                act.codes.iter().map(|&c| c as f64 * scale).collect();
                            Flow::Int(IntActivation {
                                codes: requantize(&real, spec),
                                shape: act.shape,
                                bits: spec.bits,
                                scale: spec.step(),
                            })
                        }
                        None => Flow::Int(act),
                    }
                }
                Flow::Real(mut t) => {
                    for v in t.data.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    Flow::Real(t)
                }
            },
            QNode::MaxPool { kernel, stride } => match flow {
                Flow::Int(act) => Flow::Int(maxpool_int(&act, *kernel, *stride)?),
                Flow::Real(_) => {
                    return Err(Error::State(format!("node {ni}: pooling after the real-valued tail")))
                }
            },
            QNode::AvgPool { kernel, stride } => match flow {
                Flow::Int(act) => Flow::Int(avgpool_int(&act, *kernel, *stride)?),
                Flow::Real(_) => {
                    return Err(Error::State(format!("node {ni}: pooling after the real-valued tail")))
                }
            },
            QNode::Flatten => match flow {
                Flow::Int(act) => {
                    let b = act.batch();
                    let rest = act.sample_numel();
                    Flow::Int(IntActivation {
                        codes: act.codes,
                        shape: vec![b, rest],
                        bits: act.bits,
                        scale: act.scale,
                    })
                }
                Flow::Real(t) => {
                    let b = t.batch();
                    let rest = t.sample_numel();
                    Flow::Real(t.reshape(vec![b, rest])?)
                }
            },
        };
        stats.push((format!("{}:{}", ni, node.kind_name()), counters));
    }

    let logits = match flow {
        Flow::Real(t) => t,
        Flow::Int(act) => act.dequantize(),
    };
    Ok((logits, stats))
}

fn maxpool_int(act: &IntActivation, kernel: usize, stride: usize) -> Result<IntActivation> {
    let (b, c, in_h, in_w) = pool_shape(act)?;
    let (out_h, out_w) = pool_out(in_h, in_w, kernel, stride)?;
    let mut codes = vec![0i32; b * c * out_h * out_w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &act.codes[(bi * c + ci) * in_h * in_w..];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut best = i32::MIN;
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            best = best.max(plane[(oy * stride + dy) * in_w + (ox * stride + dx)]);
                        }
                    }
                    codes[((bi * c + ci) * out_h + oy) * out_w + ox] = best;
                }
            }
        }
    }
    Ok(IntActivation {
        codes,
        shape: vec![b, c, out_h, out_w],
        bits: act.bits,
        scale: act.scale,
    })
}

/// Average pooling sums the codes and folds `1/k²` into the scale, so the
/// integer path stays exact; the bit-width metadata widens to cover the sum.
fn avgpool_int(act: &IntActivation, kernel: usize, stride: usize) -> Result<IntActivation> {
    let (b, c, in_h, in_w) = pool_shape(act)?;
    let (out_h, out_w) = pool_out(in_h, in_w, kernel, stride)?;
    let mut codes = vec![0i32; b * c * out_h * out_w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &act.codes[(bi * c + ci) * in_h * in_w..];
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0i32;
                    for dy in 0..kernel {
                        for dx in 0..kernel {
                            acc += plane[(oy * stride + dy) * in_w + (ox * stride + dx)];
                        }
                    }
                    codes[((bi * c + ci) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    let widen = usize::BITS - (kernel * kernel - 1).leading_zeros();
    let bits = (act.bits as u32 + widen).min(MAX_ACT_BITS as u32) as u8;
    Ok(IntActivation {
        codes,
        shape: vec![b, c, out_h, out_w],
        bits,
        scale: act.scale / (kernel * kernel) as f32,
    })
}

fn pool_shape(act: &IntActivation) -> Result<(usize, usize, usize, usize)> {
    if act.shape.len() != 4 {
        return Err(Error::Shape(format!("pooling expects rank-4 input, got {:?}", act.shape)));
    }
    Ok((act.shape[0], act.shape[1], act.shape[2], act.shape[3]))
}

fn pool_out(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 || in_h < kernel || in_w < kernel {
        return Err(Error::Shape(format!(
            "invalid pool geometry: kernel {kernel}, stride {stride}, input {in_h}x{in_w}"
        )));
    }
    Ok(((in_h - kernel) / stride + 1, (in_w - kernel) / stride + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{RowAssignment, RowPlan};
    use crate::quant::{pot_pack, QuantConfig};

    fn fixed_row(codes: Vec<i8>, bits: u8, scale: f32) -> QuantizedRow {
        QuantizedRow {
            config: QuantConfig::new(QuantScheme::Fixed, bits, scale).unwrap(),
            codes,
        }
    }

    fn pot_row(codes: Vec<i8>, scale: f32) -> QuantizedRow {
        QuantizedRow {
            config: QuantConfig::new(QuantScheme::PoT, 4, scale).unwrap(),
            codes,
        }
    }

    fn act(codes: Vec<i32>, bits: u8) -> IntActivation {
        let n = codes.len();
        IntActivation {
            codes,
            shape: vec![n],
            bits,
            scale: 1.0,
        }
    }

    #[test]
    fn gemm_fixed_identity_row() {
        let row = fixed_row(vec![1, 0, 0, 0], 4, 1.0);
        let a = act(vec![5, -3, 2, 7], 4);
        let mut c = OpCounters::default();
        let acc = gemm_fixed(&[&row], &a, &mut c).unwrap();
        assert_eq!(acc, vec![5]);
        assert_eq!(c.macs, 4);
        assert_eq!(c.mults, 4);
    }

    #[test]
    fn gemm_fixed_rejects_scheme_mismatch() {
        let row = pot_row(vec![pot_pack(false, 0)], 1.0);
        let a = act(vec![1], 4);
        let mut c = OpCounters::default();
        assert!(gemm_fixed(&[&row], &a, &mut c).is_err());
        let row = fixed_row(vec![1], 4, 1.0);
        assert!(gemm_pot(&[&row], &a, &mut c).is_err());
    }

    #[test]
    fn gemm_pot_single_term_shift_identity() {
        // level 2^-2 against act 8: 8 << 4 = 128 = 2^6 · (8 · 0.25)
        let row = pot_row(vec![pot_pack(false, 2)], 1.0);
        let a = act(vec![8], 4);
        let mut c = OpCounters::default();
        let acc = gemm_pot(&[&row], &a, &mut c).unwrap();
        assert_eq!(acc, vec![128]);
        assert_eq!(c.mults, 0);
        assert_eq!(c.shifts, 1);
    }

    #[test]
    fn gemm_pot_zero_sentinel_row_is_zero() {
        let row = pot_row(vec![pot_pack(false, POT_ZERO_FIELD); 6], 1.0);
        let a = act(vec![7; 6], 4);
        let mut c = OpCounters::default();
        let acc = gemm_pot(&[&row], &a, &mut c).unwrap();
        assert_eq!(acc, vec![0]);
        assert_eq!(c.shifts, 0);
        assert_eq!(c.macs, 6);
    }

    #[test]
    fn fixed_worst_case_bound_fits() {
        // 4-bit worst case at the largest inner dimension stays far from overflow
        let k = MAX_INNER_DIM;
        let worst = 7i64 * 127 * k as i64;
        assert!(worst < i64::MAX / 1024);
    }

    #[test]
    fn single_fixed_row_layer_equals_kernel_plus_requant() {
        let layer = QuantizedLayer {
            rows: vec![fixed_row(vec![2, -1, 3], 4, 0.5)],
            bias: vec![0.25],
            fused_relu: false,
            requant: Some(ActQuantSpec { bits: 4, clip: 6.0 }),
        };
        let a = IntActivation {
            codes: vec![1, 2, 3],
            shape: vec![1, 3],
            bits: 4,
            scale: 0.1,
        };
        let mut c = OpCounters::default();
        let out = infer_layer(&layer, &a, &mut c).unwrap();

        let mut c2 = OpCounters::default();
        let flat = act(vec![1, 2, 3], 4);
        let acc = gemm_fixed(&[&layer.rows[0]], &flat, &mut c2).unwrap();
        let real = acc[0] as f64 * 0.5 * 0.1f32 as f64 + 0.25;
        let spec = ActQuantSpec { bits: 4, clip: 6.0 };
        let code = ((real / spec.step() as f64).round() as i64).clamp(-7, 7) as i32;
        assert_eq!(out.codes, vec![code]);
    }

    #[test]
    fn mixed_layer_output_is_invariant_to_partition_bookkeeping() {
        // reference computes rows one by one in original order
        let rows = vec![
            pot_row(vec![pot_pack(false, 1), pot_pack(true, 3)], 0.8),
            fixed_row(vec![3, -2], 4, 0.2),
            pot_row(vec![pot_pack(false, POT_ZERO_FIELD), pot_pack(false, 0)], 0.6),
            fixed_row(vec![-7, 7], 4, 0.05),
        ];
        let layer = QuantizedLayer {
            rows: rows.clone(),
            bias: vec![0.1, -0.2, 0.3, 0.0],
            fused_relu: true,
            requant: Some(ActQuantSpec::default()),
        };
        let a = IntActivation {
            codes: vec![3, -5],
            shape: vec![1, 2],
            bits: 4,
            scale: 0.25,
        };
        let mut c = OpCounters::default();
        let out = infer_layer(&layer, &a, &mut c).unwrap();

        let mut reference = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            let mut cc = OpCounters::default();
            let flat = act(vec![3, -5], 4);
            let acc = match row.config.scheme {
                QuantScheme::PoT => gemm_pot(&[row], &flat, &mut cc).unwrap()[0] as f64 / 64.0,
                QuantScheme::Fixed => gemm_fixed(&[row], &flat, &mut cc).unwrap()[0] as f64,
            };
            let mut v = acc * row.config.scale as f64 * 0.25 + layer.bias[r] as f64;
            if v < 0.0 {
                v = 0.0;
            }
            let spec = ActQuantSpec::default();
            reference.push(((v / spec.step() as f64).round() as i64).clamp(-7, 7) as i32);
        }
        assert_eq!(out.codes, reference);
    }

    #[test]
    fn quantize_model_requires_assignments() {
        let model = Model::new(vec![Layer::Dense {
            weight: Tensor::zeros(vec![2, 2]),
            bias: Tensor::zeros(vec![2]),
        }]);
        assert!(matches!(quantize_model(&model), Err(Error::State(_))));
    }

    #[test]
    fn identity_dense_layer_returns_requantized_input() {
        // W = I under Fixed-4: row scale 1/7, diagonal codes 7, so the
        // dequantized weights are exactly identity and the logits equal the
        // quantized input values.
        let mut model = Model::new(vec![Layer::Dense {
            weight: Tensor {
                shape: vec![3, 3],
                data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            },
            bias: Tensor::zeros(vec![3]),
        }]);
        model.assignments = vec![Some(RowAssignment { rows: vec![RowPlan::FIXED4; 3] })];
        let q = quantize_model(&model).unwrap();
        let input = Tensor {
            shape: vec![1, 3],
            data: vec![0.4, -1.3, 2.0],
        };
        let out = infer(&q, &input).unwrap();
        let expected = quantize_input(&input, &model.act_quant).dequantize();
        for (a, b) in out.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn all_zero_input_and_bias_gives_zero_logits() {
        let mut model = Model::new(vec![
            Layer::Dense {
                weight: Tensor {
                    shape: vec![4, 3],
                    data: vec![0.3; 12],
                },
                bias: Tensor::zeros(vec![4]),
            },
            Layer::Relu,
            Layer::Dense {
                weight: Tensor {
                    shape: vec![2, 4],
                    data: vec![-0.2; 8],
                },
                bias: Tensor::zeros(vec![2]),
            },
        ]);
        model.assignments = vec![
            Some(RowAssignment { rows: vec![RowPlan::POT4; 4] }),
            None,
            Some(RowAssignment { rows: vec![RowPlan::FIXED8; 2] }),
        ];
        let q = quantize_model(&model).unwrap();
        let out = infer(&q, &Tensor::zeros(vec![2, 3])).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }
}
