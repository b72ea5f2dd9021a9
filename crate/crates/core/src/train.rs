//! Quantization-aware training: one-shot row assignment on the initial
//! weights, then SGD with momentum over straight-through-estimator
//! gradients. Latent float master weights are updated; quantization is
//! applied on the forward pass only.
//!
//! The loop is single-threaded and fully seeded, so identical configs
//! produce bitwise-identical weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_layer, group_by_layer, rank_filters, FilterSensitivity, RankOptions, SchemeRatio};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{backward_ste, forward, forward_trace, ActQuantSpec, Mode, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate; decays ×0.1 at 50% and 75% of the epoch budget.
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub act_bits: u8,
    pub act_clip: f32,
    /// Size of the fixed calibration batch used for sensitivity ranking.
    pub calib_batch: usize,
    /// Skip all quantizers and train the plain float model (ablation path).
    pub bypass_quant: bool,
    /// Random horizontal flip + pad-and-crop for rank-4 (image) inputs.
    pub augment: bool,
    /// Fake-quantize biases too (8-bit); biases stay real by default.
    pub quantize_bias: bool,
    pub power_iters: usize,
    pub power_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
            act_bits: 4,
            act_clip: 6.0,
            calib_batch: 256,
            bypass_quant: false,
            augment: false,
            quantize_bias: false,
            power_iters: 50,
            power_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        ActQuantSpec { bits: self.act_bits, clip: self.act_clip }.validate()
    }

    fn lr_at(&self, epoch: usize) -> f32 {
        let half = self.epochs.div_ceil(2);
        let three_quarters = (self.epochs * 3).div_ceil(4);
        if epoch >= three_quarters {
            self.lr * 0.01
        } else if epoch >= half {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// Per-run curves returned by [`qat_train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f32>,
    pub sensitivities: Vec<FilterSensitivity>,
}

/// Softmax cross-entropy over `[batch, classes]` logits.
/// Returns the mean loss and dL/dlogits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 || logits.shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape,
            labels.len()
        )));
    }
    let (b, c) = (logits.shape[0], logits.shape[1]);
    let mut grad = vec![0f32; b * c];
    let mut loss = 0f64;
    for bi in 0..b {
        let row = &logits.data[bi * c..(bi + 1) * c];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let mut denom = 0f64;
        for &x in row {
            denom += ((x - max) as f64).exp();
        }
        let label = labels[bi] as usize;
        if label >= c {
            return Err(Error::Domain(format!("label {label} out of range for {c} classes")));
        }
        loss += denom.ln() - (row[label] - max) as f64;
        for ci in 0..c {
            let p = ((row[ci] - max) as f64).exp() / denom;
            grad[bi * c + ci] = (p as f32 - if ci == label { 1.0 } else { 0.0 }) / b as f32;
        }
    }
    Ok((
        (loss / b as f64) as f32,
        Tensor {
            shape: vec![b, c],
            data: grad,
        },
    ))
}

/// One-shot assignment on the initial weights: sensitivity ranking on a
/// fixed calibration batch, then the two-step per-layer assignment.
pub fn assign_model(
    model: &mut Model,
    dataset: &Dataset,
    ratio: &SchemeRatio,
    config: &TrainConfig,
) -> Result<Vec<FilterSensitivity>> {
    let (calib_x, calib_y) = dataset.head(config.calib_batch.max(1));
    let opts = RankOptions {
        power_iters: config.power_iters,
        power_tol: config.power_tol,
        seed: config.seed,
    };
    let sensitivities = rank_filters(model, &calib_x, &calib_y, &softmax_cross_entropy, &opts)?;
    for (layer_idx, group) in group_by_layer(&sensitivities) {
        model.assignments[layer_idx] = Some(assign_layer(&group, ratio)?);
    }
    Ok(sensitivities)
}

/// Runs QAT end to end: assign once at epoch 0, then SGD with STE.
/// With `bypass_quant` the quantizers are skipped entirely and this is a
/// plain float training loop under the same schedule and RNG stream.
pub fn qat_train(
    model: &mut Model,
    dataset: &Dataset,
    ratio: &SchemeRatio,
    config: &TrainConfig,
) -> Result<TrainStats> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("training dataset is empty".into()));
    }
    model.act_quant = ActQuantSpec { bits: config.act_bits, clip: config.act_clip };
    model.bias_quant = config.quantize_bias;

    let sensitivities = if config.bypass_quant {
        Vec::new()
    } else {
        assign_model(model, dataset, ratio, config)?
    };
    let mode = if config.bypass_quant { Mode::Float } else { Mode::Qat };

    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .layers
        .iter()
        .map(|l| {
            l.weight()
                .map(|w| (vec![0f32; w.numel()], vec![0f32; l.bias().unwrap().numel()]))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261_696e));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (mut x, y) = dataset.gather(chunk);
            if config.augment && x.rank() == 4 {
                augment_batch(&mut x, &mut rng);
            }
            let trace = forward_trace(model, &x, mode)?;
            let (loss, dlogits) = softmax_cross_entropy(&trace.output, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = backward_ste(model, &trace, &dlogits)?;
            for (li, lg) in grads.by_layer.iter().enumerate() {
                let Some(lg) = lg else { continue };
                let (vw, vb) = velocity[li].as_mut().unwrap();
                match &mut model.layers[li] {
                    crate::nn::Layer::Dense { weight, bias }
                    | crate::nn::Layer::Conv2d { weight, bias, .. } => {
                        for i in 0..weight.data.len() {
                            vw[i] = config.momentum * vw[i] - lr * lg.dw.data[i];
                            weight.data[i] += vw[i];
                        }
                        for i in 0..bias.data.len() {
                            vb[i] = config.momentum * vb[i] - lr * lg.db.data[i];
                            bias.data[i] += vb[i];
                        }
                    }
                    _ => unreachable!(),
                }
            }
            epoch_loss += loss as f64;
            batches += 1;
        }
        epoch_losses.push((epoch_loss / batches.max(1) as f64) as f32);
    }

    Ok(TrainStats { epoch_losses, sensitivities })
}

/// Random horizontal flip and pad-4-crop, per sample.
fn augment_batch(x: &mut Tensor, rng: &mut ChaCha8Rng) {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let pad = 4usize;
    for bi in 0..b {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let src: Vec<f32> = x.data[bi * c * h * w..(bi + 1) * c * h * w].to_vec();
        let dst = &mut x.data[bi * c * h * w..(bi + 1) * c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = (y + dy) as i64 - pad as i64;
                    let sx = (xx + dx) as i64 - pad as i64;
                    let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        let sx = if flip { w as i64 - 1 - sx } else { sx };
                        src[(ci * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    dst[(ci * h + y) * w + xx] = v;
                }
            }
        }
    }
}

/// Top-1 accuracy under the given mode; argmax ties resolve to the lowest
/// class index.
pub fn evaluate(model: &Model, dataset: &Dataset, mode: Mode) -> Result<f64> {
    evaluate_topk(model, dataset, mode, 1)
}

/// Top-k accuracy: a sample counts when fewer than `k` classes rank
/// strictly above the true label (earlier indices win ties).
pub fn evaluate_topk(model: &Model, dataset: &Dataset, mode: Mode, k: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Domain("evaluation dataset is empty".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let mut correct = 0usize;
    let n = dataset.len();
    let chunk = 512usize;
    let mut start = 0usize;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let (x, y) = dataset.gather(&idx);
        let logits = forward(model, &x, mode)?;
        let c = logits.shape[1];
        for (bi, &label) in y.iter().enumerate() {
            let row = &logits.data[bi * c..(bi + 1) * c];
            let target = row[label as usize];
            let mut rank = 0usize;
            for (ci, &v) in row.iter().enumerate() {
                if v > target || (v == target && ci < label as usize) {
                    rank += 1;
                }
            }
            if rank < k {
                correct += 1;
            }
        }
        start += chunk;
    }
    Ok(correct as f64 / n as f64)
}
