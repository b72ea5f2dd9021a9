//! Analytic throughput/latency model for the dual-engine execution: PoT
//! rows run on LUT-fabric shift-add lanes, fixed rows on DSP multiply
//! lanes, concurrently within each layer, layer by layer across the net.
//!
//! Per-layer time is `max(pot_macs / lut_rate, (fixed4 + c8·fixed8) / dsp_rate)`
//! and the per-inference latency adds a fixed overhead term. Profiles can be
//! written by hand or calibrated with least squares from measured
//! (workload, latency) anchors; the offline ratio search walks a percentage
//! grid and picks the throughput-maximizing split.

use serde::{Deserialize, Serialize};

use crate::assignment::{apportion_counts, SchemeRatio};
use crate::error::{Error, Result};

/// Nominal clock used when materializing calibrated rates as lane counts.
pub const DEFAULT_CLOCK_HZ: f64 = 100.0e6;
/// Default relative cost of an 8-bit MAC on the DSP datapath.
pub const DEFAULT_DSP_COST8: f64 = 2.0;

/// Abstract device description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwProfile {
    pub name: String,
    /// Parallel shift-add MACs per cycle on the LUT fabric.
    pub lut_lanes: f64,
    /// Parallel 4-bit multiply MACs per cycle on the DSP blocks.
    pub dsp_lanes: f64,
    pub clock_hz: f64,
    /// Lane-cycles one 8-bit MAC costs relative to a 4-bit MAC.
    pub dsp_cost8: f64,
    /// Fixed per-inference overhead in seconds.
    pub fixed_overhead_s: f64,
}

impl HwProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.lut_lanes >= 1.0 && self.dsp_lanes >= 1.0) {
            return Err(Error::Config("lane counts must be at least 1".into()));
        }
        if !(self.clock_hz > 0.0) {
            return Err(Error::Config("clock must be positive".into()));
        }
        if !(self.dsp_cost8 > 0.0) {
            return Err(Error::Config("dsp_cost8 must be positive".into()));
        }
        if !(self.fixed_overhead_s >= 0.0) {
            return Err(Error::Config("overhead must be non-negative".into()));
        }
        Ok(())
    }

    /// Shift-add MACs per second.
    pub fn lut_rate(&self) -> f64 {
        self.lut_lanes * self.clock_hz
    }

    /// 4-bit multiply MACs per second.
    pub fn dsp_rate(&self) -> f64 {
        self.dsp_lanes * self.clock_hz
    }
}

/// Shape of one weighted layer for workload accounting: `rows` assignment
/// rows, each contributing `macs_per_row` MACs per inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub macs_per_row: u64,
}

impl LayerShape {
    pub fn total_macs(&self) -> u64 {
        self.rows as u64 * self.macs_per_row
    }
}

/// Per-layer MAC counts split by scheme bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWork {
    pub pot_macs: u64,
    pub fixed4_macs: u64,
    pub fixed8_macs: u64,
}

impl LayerWork {
    pub fn total(&self) -> u64 {
        self.pot_macs + self.fixed4_macs + self.fixed8_macs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSplit {
    pub layers: Vec<LayerWork>,
}

impl WorkloadSplit {
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.total()).sum()
    }
}

/// Splits every layer's MACs by the ratio, using the exact row
/// apportionment (so the split is integral in rows, never fractional).
pub fn workload(shapes: &[LayerShape], ratio: &SchemeRatio) -> Result<WorkloadSplit> {
    let mut layers = Vec::with_capacity(shapes.len());
    for s in shapes {
        let (npot, nf4, nf8) = apportion_counts(ratio, s.rows)?;
        layers.push(LayerWork {
            pot_macs: npot as u64 * s.macs_per_row,
            fixed4_macs: nf4 as u64 * s.macs_per_row,
            fixed8_macs: nf8 as u64 * s.macs_per_row,
        });
    }
    Ok(WorkloadSplit { layers })
}

/// Like [`workload`], but the first and last layers run entirely as 8-bit
/// fixed rows (the conventional first/last-layer treatment the published
/// baselines use); the ratio applies to the layers in between.
pub fn workload_with_first_last_fixed8(
    shapes: &[LayerShape],
    ratio: &SchemeRatio,
) -> Result<WorkloadSplit> {
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        if i == 0 || i + 1 == shapes.len() {
            layers.push(LayerWork {
                pot_macs: 0,
                fixed4_macs: 0,
                fixed8_macs: s.total_macs(),
            });
        } else {
            let (npot, nf4, nf8) = apportion_counts(ratio, s.rows)?;
            layers.push(LayerWork {
                pot_macs: npot as u64 * s.macs_per_row,
                fixed4_macs: nf4 as u64 * s.macs_per_row,
                fixed8_macs: nf8 as u64 * s.macs_per_row,
            });
        }
    }
    Ok(WorkloadSplit { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub throughput_gops: f64,
    pub latency_s: f64,
    pub per_layer_s: Vec<f64>,
}

/// Latency and throughput of a workload on a profile. The two engines run
/// concurrently within each layer (hence the per-layer `max`), layers run
/// sequentially, and one fixed overhead is added per inference. Throughput
/// counts two ops per MAC.
pub fn estimate(split: &WorkloadSplit, profile: &HwProfile) -> Estimate {
    let lut_rate = profile.lut_rate();
    let dsp_rate = profile.dsp_rate();
    let per_layer_s: Vec<f64> = split
        .layers
        .iter()
        .map(|l| {
            let lut_t = l.pot_macs as f64 / lut_rate;
            let dsp_t = (l.fixed4_macs as f64 + profile.dsp_cost8 * l.fixed8_macs as f64) / dsp_rate;
            lut_t.max(dsp_t)
        })
        .collect();
    let latency_s = per_layer_s.iter().sum::<f64>() + profile.fixed_overhead_s;
    let total_ops = 2.0 * split.total_macs() as f64;
    Estimate {
        throughput_gops: total_ops / latency_s / 1e9,
        latency_s,
        per_layer_s,
    }
}

/// One measured operating point for calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub ratio: SchemeRatio,
    /// Whether this measurement ran the first/last layers as 8-bit fixed.
    pub first_last_fixed8: bool,
    pub latency_s: f64,
}

impl Anchor {
    fn split(&self, shapes: &[LayerShape]) -> Result<WorkloadSplit> {
        if self.first_last_fixed8 {
            workload_with_first_last_fixed8(shapes, &self.ratio)
        } else {
            workload(shapes, &self.ratio)
        }
    }
}

/// Least-squares calibration of `(lut_lanes·clock, dsp_lanes·clock,
/// fixed_overhead)` from measured latencies.
///
/// The per-layer `max` makes the prediction piecewise linear; the fit
/// alternates between assigning each (anchor, layer) to its bottleneck
/// engine and solving the resulting linear least squares, which is
/// deterministic and converges in a handful of rounds. With exactly two
/// anchors the overhead is pinned to zero (three unknowns would be
/// underdetermined). Returns the profile and the RMS latency residual.
pub fn calibrate(
    anchors: &[Anchor],
    shapes: &[LayerShape],
    name: &str,
) -> Result<(HwProfile, f64)> {
    if anchors.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 2 anchors, got {}",
            anchors.len()
        )));
    }
    {
        let mut seen = Vec::new();
        for a in anchors {
            let key = (a.ratio, a.first_last_fixed8);
            if seen.contains(&key) {
                return Err(Error::InsufficientData(
                    "anchors must have distinct operating points".into(),
                ));
            }
            seen.push(key);
        }
    }
    for a in anchors {
        if !(a.latency_s > 0.0 && a.latency_s.is_finite()) {
            return Err(Error::Domain(format!("bad anchor latency {}", a.latency_s)));
        }
    }
    let fit_overhead = anchors.len() >= 3;

    // per anchor, per layer: (pot GMACs, dsp-effective GMACs)
    let mut loads: Vec<Vec<(f64, f64)>> = Vec::with_capacity(anchors.len());
    for a in anchors {
        let split = a.split(shapes)?;
        loads.push(
            split
                .layers
                .iter()
                .map(|l| {
                    (
                        l.pot_macs as f64 / 1e9,
                        (l.fixed4_macs as f64 + DEFAULT_DSP_COST8 * l.fixed8_macs as f64) / 1e9,
                    )
                })
                .collect(),
        );
    }
    let t: Vec<f64> = anchors.iter().map(|a| a.latency_s).collect();

    // seconds per GMAC on each engine, plus overhead
    let mut x = 1e-3f64;
    let mut y = 1e-3f64;
    let mut ovh = 0f64;
    let mut prev_regimes: Option<Vec<Vec<bool>>> = None;

    for _ in 0..100 {
        // true = LUT-bound layer
        let regimes: Vec<Vec<bool>> = loads
            .iter()
            .map(|layers| layers.iter().map(|&(p, d)| p * x >= d * y).collect())
            .collect();
        let mut a_col = vec![0f64; anchors.len()];
        let mut b_col = vec![0f64; anchors.len()];
        for (i, layers) in loads.iter().enumerate() {
            for (l, &(p, d)) in layers.iter().enumerate() {
                if regimes[i][l] {
                    a_col[i] += p;
                } else {
                    b_col[i] += d;
                }
            }
        }
        let (nx, ny, novh) = solve_lsq(&a_col, &b_col, &t, fit_overhead)?;
        let converged = prev_regimes.as_ref() == Some(&regimes)
            && (nx - x).abs() <= 1e-12 * nx.abs().max(1.0)
            && (ny - y).abs() <= 1e-12 * ny.abs().max(1.0);
        x = nx;
        y = ny;
        ovh = novh;
        if converged {
            break;
        }
        prev_regimes = Some(regimes);
    }

    if !(x > 0.0) || !(y > 0.0) {
        return Err(Error::DegenerateAnchors(
            "anchor set does not identify both engine rates".into(),
        ));
    }

    let profile = HwProfile {
        name: name.to_string(),
        lut_lanes: 1e9 / x / DEFAULT_CLOCK_HZ,
        dsp_lanes: 1e9 / y / DEFAULT_CLOCK_HZ,
        clock_hz: DEFAULT_CLOCK_HZ,
        dsp_cost8: DEFAULT_DSP_COST8,
        fixed_overhead_s: ovh,
    };
    profile.validate()?;

    let mut sq = 0f64;
    for (a, &measured) in anchors.iter().zip(&t) {
        let e = estimate(&a.split(shapes)?, &profile);
        sq += (e.latency_s - measured).powi(2);
    }
    Ok((profile, (sq / anchors.len() as f64).sqrt()))
}

/// Linear least squares for `a·x + b·y (+ ovh) = t` with `ovh ≥ 0`.
fn solve_lsq(a: &[f64], b: &[f64], t: &[f64], fit_overhead: bool) -> Result<(f64, f64, f64)> {
    let n = a.len();
    let dims = if fit_overhead { 3 } else { 2 };
    let row = |i: usize| -> [f64; 3] { [a[i], b[i], 1.0] };
    let mut ata = [[0f64; 3]; 3];
    let mut atb = [0f64; 3];
    for i in 0..n {
        let r = row(i);
        for p in 0..dims {
            for q in 0..dims {
                ata[p][q] += r[p] * r[q];
            }
            atb[p] += r[p] * t[i];
        }
    }
    match gauss_solve(&mut ata, &mut atb, dims) {
        Some(sol) => {
            let ovh = if fit_overhead { sol[2] } else { 0.0 };
            if fit_overhead && ovh < 0.0 {
                // refit on the boundary
                let (x, y, _) = solve_lsq(a, b, t, false)?;
                return Ok((x, y, 0.0));
            }
            Ok((sol[0], sol[1], ovh))
        }
        None => Err(Error::DegenerateAnchors(
            "normal equations are singular; anchors do not span both engines".into(),
        )),
    }
}

fn gauss_solve(m: &mut [[f64; 3]; 3], rhs: &mut [f64; 3], dims: usize) -> Option<[f64; 3]> {
    let scale: f64 = (0..dims)
        .map(|i| m[i][i].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for col in 0..dims {
        let mut pivot = col;
        for r in col + 1..dims {
            if m[r][col].abs() > m[pivot][col].abs() {
                pivot = r;
            }
        }
        if m[pivot][col].abs() < 1e-12 * scale {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..dims {
            let f = m[r][col] / m[col][col];
            for c in col..dims {
                m[r][c] -= f * m[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut sol = [0f64; 3];
    for col in (0..dims).rev() {
        let mut acc = rhs[col];
        for c in col + 1..dims {
            acc -= m[col][c] * sol[c];
        }
        sol[col] = acc / m[col][col];
    }
    Some(sol)
}

/// Grid search over `pot4 ∈ {0, step, …, 100 − fixed8}` (fixed4 takes the
/// remainder) maximizing estimated throughput; ties go to the larger PoT
/// share.
pub fn optimal_ratio(
    profile: &HwProfile,
    shapes: &[LayerShape],
    fixed8_percent: u32,
    step: u32,
) -> Result<SchemeRatio> {
    let grid = sweep(profile, shapes, fixed8_percent, step)?;
    let mut best = &grid[0];
    for point in &grid[1..] {
        // grid walks pot4 ascending, so >= keeps the larger pot4 on ties
        if point.1.throughput_gops >= best.1.throughput_gops {
            best = point;
        }
    }
    Ok(best.0)
}

/// Full ratio grid with per-point estimates, pot4 ascending.
pub fn sweep(
    profile: &HwProfile,
    shapes: &[LayerShape],
    fixed8_percent: u32,
    step: u32,
) -> Result<Vec<(SchemeRatio, Estimate)>> {
    profile.validate()?;
    if fixed8_percent > 100 {
        return Err(Error::Config("fixed8 percent above 100".into()));
    }
    let span = 100 - fixed8_percent;
    if step == 0 || span % step != 0 {
        return Err(Error::Config(format!(
            "step {step} must divide the search span {span}"
        )));
    }
    if shapes.is_empty() {
        return Err(Error::Config("no layer shapes to sweep".into()));
    }
    let mut out = Vec::with_capacity((span / step + 1) as usize);
    let mut pot = 0u32;
    loop {
        let ratio = SchemeRatio::new(pot, span - pot, fixed8_percent)?;
        let split = workload(shapes, &ratio)?;
        out.push((ratio, estimate(&split, profile)));
        if pot == span {
            break;
        }
        pot += step;
    }
    Ok(out)
}

/// Standard ResNet-18 (224×224 input) layer table used for device-level
/// workload accounting: rows are output channels, `macs_per_row` counts one
/// forward pass. Totals 1.814 GMACs ≈ 3.63 GOPs.
pub fn resnet18_shapes() -> Vec<LayerShape> {
    let mut shapes = Vec::new();
    let mut push = |name: &str, rows: usize, macs_per_row: u64| {
        shapes.push(LayerShape {
            name: name.to_string(),
            rows,
            macs_per_row,
        });
    };
    let conv = |in_c: u64, k: u64, out_hw: u64| in_c * k * k * out_hw * out_hw;

    push("conv1", 64, conv(3, 7, 112));
    for b in 0..2 {
        push(&format!("layer1.{b}.conv1"), 64, conv(64, 3, 56));
        push(&format!("layer1.{b}.conv2"), 64, conv(64, 3, 56));
    }
    push("layer2.0.conv1", 128, conv(64, 3, 28));
    push("layer2.0.conv2", 128, conv(128, 3, 28));
    push("layer2.0.downsample", 128, conv(64, 1, 28));
    push("layer2.1.conv1", 128, conv(128, 3, 28));
    push("layer2.1.conv2", 128, conv(128, 3, 28));
    push("layer3.0.conv1", 256, conv(128, 3, 14));
    push("layer3.0.conv2", 256, conv(256, 3, 14));
    push("layer3.0.downsample", 256, conv(128, 1, 14));
    push("layer3.1.conv1", 256, conv(256, 3, 14));
    push("layer3.1.conv2", 256, conv(256, 3, 14));
    push("layer4.0.conv1", 512, conv(256, 3, 7));
    push("layer4.0.conv2", 512, conv(512, 3, 7));
    push("layer4.0.downsample", 512, conv(256, 1, 7));
    push("layer4.1.conv1", 512, conv(512, 3, 7));
    push("layer4.1.conv2", 512, conv(512, 3, 7));
    push("fc", 1000, 512);
    shapes
}

/// Published single-batch ResNet-18 measurements on the two Zynq-7000
/// boards the model ships calibration data for.
pub mod anchors {
    use super::Anchor;
    use crate::assignment::SchemeRatio;

    /// One measured table row: scheme ratio, whether the first/last layers
    /// ran as 8-bit fixed, and the measured latency/throughput.
    #[derive(Debug, Clone, PartialEq)]
    pub struct MeasuredRow {
        pub ratio: SchemeRatio,
        pub first_last_fixed8: bool,
        pub latency_ms: f64,
        pub throughput_gops: f64,
        /// The row reported as the device's optimal mixed ratio.
        pub optimal: bool,
    }

    fn row(ratio: &str, fl8: bool, latency_ms: f64, gops: f64, optimal: bool) -> MeasuredRow {
        MeasuredRow {
            ratio: ratio.parse().unwrap(),
            first_last_fixed8: fl8,
            latency_ms,
            throughput_gops: gops,
            optimal,
        }
    }

    /// XC7Z020 measurements (rows with missing cells are omitted).
    pub fn xc7z020() -> Vec<MeasuredRow> {
        vec![
            row("0:100:0", true, 122.6, 29.6, false),
            row("0:100:0", false, 99.3, 36.5, false),
            row("100:0:0", true, 58.1, 62.4, false),
            row("100:0:0", false, 50.2, 72.2, false),
            row("50:50:0", true, 72.0, 50.3, false),
            row("50:50:0", false, 47.8, 75.8, false),
            row("60:40:0", true, 63.6, 57.0, false),
            row("60:35:5", false, 40.7, 89.0, true),
        ]
    }

    /// XC7Z045 measurements (rows with missing cells are omitted).
    pub fn xc7z045() -> Vec<MeasuredRow> {
        vec![
            row("0:100:0", true, 31.4, 115.6, false),
            row("0:100:0", false, 25.4, 142.7, false),
            row("100:0:0", true, 12.5, 290.5, false),
            row("100:0:0", false, 10.3, 352.6, false),
            row("50:50:0", true, 18.4, 196.8, false),
            row("50:50:0", false, 12.2, 296.3, false),
            row("67:33:0", true, 14.8, 245.8, false),
            row("65:30:5", false, 8.6, 421.1, true),
        ]
    }

    pub fn to_anchors(rows: &[MeasuredRow]) -> Vec<Anchor> {
        rows.iter()
            .map(|r| Anchor {
                ratio: r.ratio,
                first_last_fixed8: r.first_last_fixed8,
                latency_s: r.latency_ms / 1e3,
            })
            .collect()
    }

    pub fn by_device(device: &str) -> Option<Vec<MeasuredRow>> {
        match device.to_ascii_lowercase().as_str() {
            "xc7z020" => Some(xc7z020()),
            "xc7z045" => Some(xc7z045()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(s: &str) -> SchemeRatio {
        s.parse().unwrap()
    }

    fn toy_shapes() -> Vec<LayerShape> {
        vec![
            LayerShape { name: "a".into(), rows: 20, macs_per_row: 1000 },
            LayerShape { name: "b".into(), rows: 40, macs_per_row: 500 },
            LayerShape { name: "c".into(), rows: 10, macs_per_row: 2000 },
        ]
    }

    fn toy_profile() -> HwProfile {
        HwProfile {
            name: "toy".into(),
            lut_lanes: 64.0,
            dsp_lanes: 32.0,
            clock_hz: 1e6,
            dsp_cost8: 2.0,
            fixed_overhead_s: 1e-4,
        }
    }

    #[test]
    fn workload_trivials() {
        let shapes = toy_shapes();
        let all_pot = workload(&shapes, &ratio("100:0:0")).unwrap();
        for l in &all_pot.layers {
            assert_eq!(l.fixed4_macs + l.fixed8_macs, 0);
        }
        // 20-row layer at 60:35:5 splits rows 12:7:1
        let w = workload(&shapes, &ratio("60:35:5")).unwrap();
        assert_eq!(w.layers[0].pot_macs, 12 * 1000);
        assert_eq!(w.layers[0].fixed4_macs, 7 * 1000);
        assert_eq!(w.layers[0].fixed8_macs, 1000);
    }

    #[test]
    fn workload_conserves_total_macs() {
        let shapes = toy_shapes();
        let total: u64 = shapes.iter().map(|s| s.total_macs()).sum();
        for pot in (0..=100).step_by(10) {
            for f8 in (0..=(100 - pot)).step_by(10) {
                let r = SchemeRatio::new(pot, 100 - pot - f8, f8).unwrap();
                assert_eq!(workload(&shapes, &r).unwrap().total_macs(), total);
                assert_eq!(
                    workload_with_first_last_fixed8(&shapes, &r).unwrap().total_macs(),
                    total
                );
            }
        }
    }

    #[test]
    fn estimate_all_pot_is_lut_bound() {
        let shapes = toy_shapes();
        let profile = toy_profile();
        let split = workload(&shapes, &ratio("100:0:0")).unwrap();
        let e = estimate(&split, &profile);
        let lut_only: f64 = split
            .layers
            .iter()
            .map(|l| l.pot_macs as f64 / profile.lut_rate())
            .sum::<f64>()
            + profile.fixed_overhead_s;
        assert!((e.latency_s - lut_only).abs() < 1e-15);
    }

    #[test]
    fn doubling_lanes_halves_compute_latency() {
        let shapes = toy_shapes();
        let mut profile = toy_profile();
        profile.fixed_overhead_s = 0.0;
        let split = workload(&shapes, &ratio("50:45:5")).unwrap();
        let base = estimate(&split, &profile);
        profile.lut_lanes *= 2.0;
        profile.dsp_lanes *= 2.0;
        let fast = estimate(&split, &profile);
        assert!((fast.latency_s - base.latency_s / 2.0).abs() < 1e-12);
    }

    #[test]
    fn per_layer_latency_is_unimodal_in_the_split() {
        // moving work from the bottleneck engine toward the idle one never
        // increases latency: scan the grid and check the V shape
        let shapes = vec![LayerShape { name: "l".into(), rows: 100, macs_per_row: 10_000 }];
        let profile = toy_profile();
        let mut latencies = Vec::new();
        for pot in (0..=100).step_by(5) {
            let r = SchemeRatio::new(pot, 100 - pot, 0).unwrap();
            latencies.push(estimate(&workload(&shapes, &r).unwrap(), &profile).latency_s);
        }
        let min_idx = latencies
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for i in 1..=min_idx {
            assert!(latencies[i] <= latencies[i - 1] + 1e-15);
        }
        for i in min_idx + 1..latencies.len() {
            assert!(latencies[i] >= latencies[i - 1] - 1e-15);
        }
    }

    #[test]
    fn calibration_round_trips_synthetic_anchors() {
        let shapes = toy_shapes();
        let truth = toy_profile();
        let points = ["100:0:0", "0:100:0", "50:50:0", "60:35:5", "20:75:5"];
        let anchors: Vec<Anchor> = points
            .iter()
            .map(|r| {
                let ratio = ratio(r);
                let split = workload(&shapes, &ratio).unwrap();
                Anchor {
                    ratio,
                    first_last_fixed8: false,
                    latency_s: estimate(&split, &truth).latency_s,
                }
            })
            .collect();
        let (fit, residual) = calibrate(&anchors, &shapes, "fit").unwrap();
        assert!(residual < 1e-12, "residual {residual}");
        assert!((fit.lut_rate() - truth.lut_rate()).abs() / truth.lut_rate() < 1e-6);
        assert!((fit.dsp_rate() - truth.dsp_rate()).abs() / truth.dsp_rate() < 1e-6);
        assert!((fit.fixed_overhead_s - truth.fixed_overhead_s).abs() < 1e-9);
    }

    #[test]
    fn calibration_needs_two_informative_anchors() {
        let shapes = toy_shapes();
        let one = vec![Anchor {
            ratio: ratio("0:100:0"),
            first_last_fixed8: false,
            latency_s: 0.5,
        }];
        assert!(matches!(
            calibrate(&one, &shapes, "x"),
            Err(Error::InsufficientData(_))
        ));
        // two all-fixed anchors never exercise the LUT engine
        let degenerate = vec![
            Anchor { ratio: ratio("0:100:0"), first_last_fixed8: false, latency_s: 0.5 },
            Anchor { ratio: ratio("0:100:0"), first_last_fixed8: true, latency_s: 0.6 },
        ];
        assert!(matches!(
            calibrate(&degenerate, &shapes, "x"),
            Err(Error::DegenerateAnchors(_))
        ));
    }

    #[test]
    fn optimal_ratio_degenerate_devices() {
        let shapes = toy_shapes();
        // DSP engine effectively absent → push everything to PoT
        let lut_heavy = HwProfile {
            name: "lut".into(),
            lut_lanes: 1e9,
            dsp_lanes: 1.0,
            clock_hz: 1e6,
            dsp_cost8: 2.0,
            fixed_overhead_s: 0.0,
        };
        assert_eq!(optimal_ratio(&lut_heavy, &shapes, 5, 5).unwrap(), ratio("95:0:5"));
        // LUT engine effectively absent → no PoT at all
        let dsp_heavy = HwProfile {
            name: "dsp".into(),
            lut_lanes: 1.0,
            dsp_lanes: 1e9,
            clock_hz: 1e6,
            dsp_cost8: 2.0,
            fixed_overhead_s: 0.0,
        };
        assert_eq!(optimal_ratio(&dsp_heavy, &shapes, 5, 5).unwrap(), ratio("0:95:5"));
    }

    #[test]
    fn sweep_step_100_gives_two_points() {
        let shapes = toy_shapes();
        let grid = sweep(&toy_profile(), &shapes, 0, 100).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].0, ratio("0:100:0"));
        assert_eq!(grid[1].0, ratio("100:0:0"));
        assert!(sweep(&toy_profile(), &shapes, 5, 7).is_err());
    }

    #[test]
    fn resnet18_totals_match_the_published_op_count() {
        let shapes = resnet18_shapes();
        let macs: u64 = shapes.iter().map(|s| s.total_macs()).sum();
        assert_eq!(macs, 1_814_073_344);
        let gops = 2.0 * macs as f64 / 1e9;
        assert!((gops - 3.6).abs() < 0.1, "{gops}");
    }

    #[test]
    fn ties_in_optimal_ratio_go_to_larger_pot() {
        // a single-row layer apportions identically for every pot share
        // above 50%, so those grid points tie exactly; the largest pot4 wins
        let shapes = vec![LayerShape { name: "l".into(), rows: 1, macs_per_row: 1000 }];
        let profile = HwProfile {
            name: "tie".into(),
            lut_lanes: 100.0,
            dsp_lanes: 10.0,
            clock_hz: 1e6,
            dsp_cost8: 2.0,
            fixed_overhead_s: 0.0,
        };
        let grid = sweep(&profile, &shapes, 0, 25).unwrap();
        assert_eq!(
            grid[2].1.throughput_gops, grid[4].1.throughput_gops,
            "test premise: 50/75/100 tie"
        );
        let best = optimal_ratio(&profile, &shapes, 0, 25).unwrap();
        assert_eq!(best, ratio("100:0:0"));
    }
}
