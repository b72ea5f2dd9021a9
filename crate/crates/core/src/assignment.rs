//! Two-step per-row scheme/precision assignment.
//!
//! Step 1 ranks filters by the largest eigenvalue of each filter's own
//! Hessian block (power iteration over central-difference Hessian-vector
//! products) and gives the top slice 8-bit fixed-point. Step 2 sorts the
//! 4-bit remainder by weight variance: low-variance rows become PoT (their
//! mass sits near zero, where PoT resolution is densest), the rest stay
//! fixed-point. Counts come from largest-remainder apportionment of the
//! configured ratio, so realized counts are exact, never fractional.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{backward_ste, forward_trace, Mode, Model};
use crate::quant::QuantScheme;
use crate::tensor::Tensor;

/// A `pot4 : fixed4 : fixed8` percentage triple, e.g. `60:35:5`.
///
/// Serializes as the colon-separated string form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchemeRatio {
    pot4: u32,
    fixed4: u32,
    fixed8: u32,
}

impl SchemeRatio {
    pub fn new(pot4: u32, fixed4: u32, fixed8: u32) -> Result<Self> {
        if pot4 + fixed4 + fixed8 != 100 {
            return Err(Error::Config(format!(
                "ratio {pot4}:{fixed4}:{fixed8} must sum to 100"
            )));
        }
        Ok(Self { pot4, fixed4, fixed8 })
    }

    pub fn pot4(&self) -> u32 {
        self.pot4
    }

    pub fn fixed4(&self) -> u32 {
        self.fixed4
    }

    pub fn fixed8(&self) -> u32 {
        self.fixed8
    }
}

impl std::fmt::Display for SchemeRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.pot4, self.fixed4, self.fixed8)
    }
}

impl FromStr for SchemeRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "ratio must look like P:F:E, got {s:?}"
            )));
        }
        let parse = |p: &str| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad ratio component {p:?}")))
        };
        SchemeRatio::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?)
    }
}

impl Serialize for SchemeRatio {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SchemeRatio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|e| D::Error::custom(format!("{e}")))
    }
}

/// Sensitivity record for one (layer, row) filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSensitivity {
    pub layer: usize,
    pub row: usize,
    /// Largest eigenvalue estimate of the filter's Hessian block.
    pub lambda_max: f64,
    /// Population variance of the row's raw weights.
    pub variance: f64,
}

/// Scheme and bit-width planned for one row; the scale is derived from the
/// live weights at each quantization point, so it is not stored here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowPlan {
    pub scheme: QuantScheme,
    pub bits: u8,
}

impl RowPlan {
    pub const POT4: RowPlan = RowPlan { scheme: QuantScheme::PoT, bits: 4 };
    pub const FIXED4: RowPlan = RowPlan { scheme: QuantScheme::Fixed, bits: 4 };
    pub const FIXED8: RowPlan = RowPlan { scheme: QuantScheme::Fixed, bits: 8 };
}

/// Per-row plans for one layer, indexed by row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowAssignment {
    pub rows: Vec<RowPlan>,
}

impl RowAssignment {
    /// Realized `(pot4, fixed4, fixed8)` counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.rows {
            match (*r).scheme {
                QuantScheme::PoT => c.0 += 1,
                QuantScheme::Fixed if r.bits == 4 => c.1 += 1,
                QuantScheme::Fixed => c.2 += 1,
            }
        }
        c
    }
}

/// Central-difference Hessian-vector product:
/// `(g(p + ε·v̂) − g(p − ε·v̂)) / (2ε) · |v|`.
///
/// Exact (up to rounding) for quadratic losses, since the third derivative
/// term of the expansion vanishes.
pub fn hvp<G>(mut grad: G, params: &[f64], v: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != params.len() {
        return Err(Error::Contract(format!(
            "direction has {} components, params have {}",
            v.len(),
            params.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("zero direction vector".into()));
    }
    let plus: Vec<f64> = params
        .iter()
        .zip(v)
        .map(|(&p, &d)| p + epsilon * d / norm)
        .collect();
    let minus: Vec<f64> = params
        .iter()
        .zip(v)
        .map(|(&p, &d)| p - epsilon * d / norm)
        .collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != params.len() || gm.len() != params.len() {
        return Err(Error::Contract("gradient oracle returned wrong dimension".into()));
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(&a, &b)| (a - b) / (2.0 * epsilon) * norm)
        .collect())
}

/// Power iteration with a seeded random start; returns the Rayleigh quotient
/// once `|Δλ| < tol·|λ|` or the iteration cap is hit. For symmetric
/// operators this is the eigenvalue of largest magnitude, with its sign.
pub fn lambda_max_power_iteration<H>(
    mut hvp_oracle: H,
    dim: usize,
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64>
where
    H: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::Domain("zero-dimensional operator".into()));
    }
    if iters < 1 {
        return Err(Error::Domain("iters must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain("tol must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut lambda = 0.0f64;
    for it in 0..iters {
        let w = hvp_oracle(&v)?;
        if w.len() != dim {
            return Err(Error::Contract(format!(
                "operator returned dimension {}, expected {dim}",
                w.len()
            )));
        }
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm < 1e-300 {
            // operator annihilated the iterate: zero (or numerically zero) map
            return Ok(0.0);
        }
        if it > 0 && (rayleigh - lambda).abs() < tol * rayleigh.abs().max(1e-300) {
            return Ok(rayleigh);
        }
        lambda = rayleigh;
        v = w;
        normalize(&mut v);
    }
    Ok(lambda)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Largest-remainder apportionment of `rows` over the three buckets, with
/// remainder ties resolved PoT > Fixed-4 > Fixed-8 and at least one Fixed-8
/// row whenever the ratio calls for any.
pub fn apportion_counts(ratio: &SchemeRatio, rows: usize) -> Result<(usize, usize, usize)> {
    if rows == 0 {
        return Err(Error::Domain("cannot apportion zero rows".into()));
    }
    let pcts = [ratio.pot4 as u64, ratio.fixed4 as u64, ratio.fixed8 as u64];
    let mut floors = [0usize; 3];
    let mut rems = [0u64; 3];
    for (i, &p) in pcts.iter().enumerate() {
        let num = rows as u64 * p;
        floors[i] = (num / 100) as usize;
        rems[i] = num % 100;
    }
    // Minimum-presence floor: any nonzero fixed8 share yields at least one
    // 8-bit row per layer. When it fires, the quotas cannot all be integral,
    // so there is a leftover seat to consume.
    if ratio.fixed8 > 0 && floors[2] == 0 {
        floors[2] = 1;
        rems[2] = 0;
    }
    let assigned: usize = floors.iter().sum();
    debug_assert!(assigned <= rows);
    let leftover = rows - assigned;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &bucket in order.iter().take(leftover) {
        floors[bucket] += 1;
    }
    Ok((floors[0], floors[1], floors[2]))
}

/// Two-step assignment for one layer: the `n_fixed8` rows with the largest
/// `lambda_max` get Fixed-8; of the remainder, the `n_pot4` rows with the
/// smallest variance get PoT-4, the rest Fixed-4. Ties fall back to row
/// index ascending, so the result is deterministic.
pub fn assign_layer(sensitivities: &[FilterSensitivity], ratio: &SchemeRatio) -> Result<RowAssignment> {
    let n = sensitivities.len();
    if n == 0 {
        return Err(Error::Domain("cannot assign an empty layer".into()));
    }
    let mut seen = vec![false; n];
    for s in sensitivities {
        if s.row >= n || seen[s.row] {
            return Err(Error::Contract(format!(
                "sensitivities must cover rows 0..{n} exactly once (row {})",
                s.row
            )));
        }
        if !s.lambda_max.is_finite() || !s.variance.is_finite() || s.variance < 0.0 {
            return Err(Error::Contract(format!(
                "invalid sensitivity for row {}: lambda={} variance={}",
                s.row, s.lambda_max, s.variance
            )));
        }
        seen[s.row] = true;
    }
    let (n_pot4, _n_fixed4, n_fixed8) = apportion_counts(ratio, n)?;

    let mut by_lambda: Vec<&FilterSensitivity> = sensitivities.iter().collect();
    by_lambda.sort_by(|a, b| b.lambda_max.total_cmp(&a.lambda_max).then(a.row.cmp(&b.row)));

    let mut plans = vec![RowPlan::FIXED4; n];
    for s in by_lambda.iter().take(n_fixed8) {
        plans[s.row] = RowPlan::FIXED8;
    }
    let mut remainder: Vec<&&FilterSensitivity> = by_lambda.iter().skip(n_fixed8).collect();
    remainder.sort_by(|a, b| a.variance.total_cmp(&b.variance).then(a.row.cmp(&b.row)));
    for s in remainder.iter().take(n_pot4) {
        plans[s.row] = RowPlan::POT4;
    }
    Ok(RowAssignment { rows: plans })
}

/// Knobs for the per-filter eigenvalue estimation.
#[derive(Debug, Clone, Copy)]
pub struct RankOptions {
    pub power_iters: usize,
    pub power_tol: f64,
    pub seed: u64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { power_iters: 50, power_tol: 1e-4, seed: 0 }
    }
}

/// Scores every filter of every weighted layer on a fixed calibration batch.
///
/// The Hessian is restricted to each filter's own weight block; its largest
/// eigenvalue comes from power iteration over central-difference HVPs of the
/// supplied loss. The returned list is sorted by layer, then `lambda_max`
/// descending, then row ascending. Per-filter work is independent and
/// individually seeded, so the parallel evaluation is deterministic.
pub fn rank_filters<L>(
    model: &Model,
    inputs: &Tensor,
    labels: &[u32],
    loss: &L,
    opts: &RankOptions,
) -> Result<Vec<FilterSensitivity>>
where
    L: Fn(&Tensor, &[u32]) -> Result<(f32, Tensor)> + Sync,
{
    if inputs.batch() == 0 || labels.is_empty() {
        return Err(Error::Domain("calibration batch is empty".into()));
    }
    if inputs.batch() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs vs {} labels",
            inputs.batch(),
            labels.len()
        )));
    }
    let mut tasks: Vec<(usize, usize)> = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        if let Some(rows) = layer.rows() {
            if rows == 0 {
                return Err(Error::Shape(format!("layer {idx} has no output rows")));
            }
            for r in 0..rows {
                tasks.push((idx, r));
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::State("model has no quantizable layers".into()));
    }

    let mut out: Vec<FilterSensitivity> = tasks
        .par_iter()
        .map(|&(layer_idx, row)| filter_sensitivity(model, inputs, labels, loss, opts, layer_idx, row))
        .collect::<Result<Vec<_>>>()?;

    out.sort_by(|a, b| {
        a.layer
            .cmp(&b.layer)
            .then(b.lambda_max.total_cmp(&a.lambda_max))
            .then(a.row.cmp(&b.row))
    });
    Ok(out)
}

fn filter_sensitivity<L>(
    model: &Model,
    inputs: &Tensor,
    labels: &[u32],
    loss: &L,
    opts: &RankOptions,
    layer_idx: usize,
    row: usize,
) -> Result<FilterSensitivity>
where
    L: Fn(&Tensor, &[u32]) -> Result<(f32, Tensor)> + Sync,
{
    let current: Vec<f64> = model.layers[layer_idx]
        .row_weights(row)
        .iter()
        .map(|&w| w as f64)
        .collect();
    let dim = current.len();
    let variance = population_variance(&current);
    let theta_norm = current.iter().map(|x| x * x).sum::<f64>().sqrt();
    let epsilon = 1e-3 * (1.0 + theta_norm);

    let mut scratch = model.clone();
    let mut grad_at = move |w: &[f64]| -> Result<Vec<f64>> {
        scratch.layers[layer_idx].set_row_weights(row, w);
        let trace = forward_trace(&scratch, inputs, Mode::Float)?;
        let (_, dlogits) = loss(&trace.output, labels)?;
        let grads = backward_ste(&scratch, &trace, &dlogits)?;
        let lg = grads.by_layer[layer_idx]
            .as_ref()
            .ok_or_else(|| Error::Contract("weighted layer produced no gradient".into()))?;
        let cols = dim;
        Ok(lg.dw.data[row * cols..(row + 1) * cols]
            .iter()
            .map(|&g| g as f64)
            .collect())
    };

    let seed = opts.seed ^ splitmix(layer_idx as u64 * 0x9e37_79b9 + row as u64 + 1);
    let lambda_max = lambda_max_power_iteration(
        |v| hvp(&mut grad_at, &current, v, epsilon),
        dim,
        opts.power_iters,
        opts.power_tol,
        seed,
    )?;
    Ok(FilterSensitivity { layer: layer_idx, row, lambda_max, variance })
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Groups a flat sensitivity list by layer, preserving order within layers.
pub fn group_by_layer(sensitivities: &[FilterSensitivity]) -> Vec<(usize, Vec<FilterSensitivity>)> {
    let mut groups: Vec<(usize, Vec<FilterSensitivity>)> = Vec::new();
    for s in sensitivities {
        match groups.last_mut() {
            Some((layer, list)) if *layer == s.layer => list.push(*s),
            _ => groups.push((s.layer, vec![*s])),
        }
    }
    groups
}
