//! Scalar and row-level quantizer kernels.
//!
//! Two schemes are supported. Fixed-point uses a symmetric signed integer
//! grid `code * scale` with codes in `[-(2^(b-1)-1), 2^(b-1)-1]`.
//! Power-of-two (PoT) restricts magnitudes to `0` or `scale * 2^-k` with
//! `k` in `[0, 6]`, so a multiply by a PoT weight is a bit shift.
//!
//! PoT codes are packed as one sign bit over a 3-bit magnitude field: the
//! field holds the exponent `k`, with field 7 reserved as the zero sentinel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantization scheme tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Fixed,
    PoT,
}

impl std::fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantScheme::Fixed => write!(f, "fixed"),
            QuantScheme::PoT => write!(f, "pot"),
        }
    }
}

/// Magnitude-field value reserved for zero in packed PoT codes.
pub const POT_ZERO_FIELD: u8 = 7;
/// Largest PoT exponent: levels run `2^0 .. 2^-POT_MAX_EXPONENT`.
pub const POT_MAX_EXPONENT: u8 = 6;
/// `gemm_pot` accumulators are pre-scaled by `2^POT_PRESCALE_SHIFT` so that
/// every level contribution stays integral.
pub const POT_PRESCALE_SHIFT: u32 = 6;

/// Per-row quantizer configuration: scheme, bit-width, and the positive real
/// scale (grid step for Fixed, magnitude multiplier for PoT).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub scheme: QuantScheme,
    pub bits: u8,
    pub scale: f32,
}

impl QuantConfig {
    pub fn new(scheme: QuantScheme, bits: u8, scale: f32) -> Result<Self> {
        if bits != 4 && bits != 8 {
            return Err(Error::Config(format!("bits must be 4 or 8, got {bits}")));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive and finite, got {scale}")));
        }
        if scheme == QuantScheme::PoT && bits != 4 {
            return Err(Error::Config("PoT is only defined for 4 bits".into()));
        }
        Ok(Self { scheme, bits, scale })
    }

    /// Largest representable code magnitude for the fixed-point grid.
    pub fn qmax(&self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

/// Ordered set of representable unsigned PoT magnitudes (before sign).
#[derive(Debug, Clone, PartialEq)]
pub struct PotCodebook {
    pub bits: u8,
    pub levels: Vec<f32>,
}

/// Builds the PoT level set `{0} ∪ {2^-k : k = 0..=6}` for 4-bit codes,
/// sorted ascending. Other widths are rejected.
pub fn pot_codebook(bits: u8) -> Result<PotCodebook> {
    if bits != 4 {
        return Err(Error::Unsupported(format!(
            "PoT codebook is only defined for 4 bits, got {bits}"
        )));
    }
    let mut levels = vec![0.0f32];
    for k in (0..=POT_MAX_EXPONENT).rev() {
        levels.push(2f32.powi(-(k as i32)));
    }
    Ok(PotCodebook { bits, levels })
}

/// One quantized weight row: the config it was produced under plus one code
/// byte per element (Fixed: signed value; PoT: packed sign + magnitude field).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedRow {
    pub config: QuantConfig,
    pub codes: Vec<i8>,
}

impl QuantizedRow {
    /// Validating constructor for codes coming from outside (e.g. a model
    /// file); quantizers build rows directly.
    pub fn new(config: QuantConfig, codes: Vec<i8>) -> Result<Self> {
        match config.scheme {
            QuantScheme::Fixed => {
                let qmax = config.qmax();
                if let Some(c) = codes.iter().find(|&&c| (c as i32).abs() > qmax) {
                    return Err(Error::Contract(format!(
                        "fixed code {c} out of range ±{qmax}"
                    )));
                }
            }
            QuantScheme::PoT => {
                if let Some(c) = codes.iter().find(|&&c| !(0..16).contains(&(c as i16))) {
                    return Err(Error::Contract(format!("PoT code {c} is not a packed nibble")));
                }
                for &c in &codes {
                    let (neg, field) = pot_unpack(c);
                    if field == POT_ZERO_FIELD && neg {
                        return Err(Error::Contract(
                            "negative zero sentinel is not a valid PoT code".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self { config, codes })
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.codes
            .iter()
            .map(|&c| match self.config.scheme {
                QuantScheme::Fixed => c as f32 * self.config.scale,
                QuantScheme::PoT => pot_code_value(c, self.config.scale),
            })
            .collect()
    }
}

/// Packs a PoT sign and magnitude field into a code byte.
pub fn pot_pack(negative: bool, field: u8) -> i8 {
    debug_assert!(field <= POT_ZERO_FIELD);
    (((negative as u8) << 3) | field) as i8
}

/// Splits a packed PoT code into (negative, magnitude field).
pub fn pot_unpack(code: i8) -> (bool, u8) {
    let c = code as u8;
    ((c >> 3) & 1 == 1, c & 0b111)
}

/// Real value of a packed PoT code under `scale`.
pub fn pot_code_value(code: i8, scale: f32) -> f32 {
    let (neg, field) = pot_unpack(code);
    if field == POT_ZERO_FIELD {
        return 0.0;
    }
    let mag = scale * 2f32.powi(-(field as i32));
    if neg {
        -mag
    } else {
        mag
    }
}

/// Symmetric fixed-point quantizer: `clamp(round(x / scale), -qmax, qmax)`
/// with round-half-away-from-zero.
pub fn fixed_quantize(x: f32, config: &QuantConfig) -> Result<i8> {
    if config.scheme != QuantScheme::Fixed {
        return Err(Error::Contract("fixed_quantize requires a Fixed config".into()));
    }
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot quantize non-finite value {x}")));
    }
    let qmax = config.qmax() as f32;
    // f32::round ties away from zero, which is exactly the rounding rule here.
    let code = (x / config.scale).round().clamp(-qmax, qmax);
    Ok(code as i8)
}

/// Inverse of [`fixed_quantize`]: `code * scale`.
pub fn fixed_dequantize(code: i8, config: &QuantConfig) -> Result<f32> {
    if config.scheme != QuantScheme::Fixed {
        return Err(Error::Contract("fixed_dequantize requires a Fixed config".into()));
    }
    if (code as i32).abs() > config.qmax() {
        return Err(Error::Contract(format!(
            "code {code} out of range ±{} for {} bits",
            config.qmax(),
            config.bits
        )));
    }
    Ok(code as f32 * config.scale)
}

/// PoT quantizer: picks the codebook magnitude nearest to `|x| / scale`
/// (ties toward the larger magnitude) and packs it with the sign of `x`.
pub fn pot_quantize(x: f32, config: &QuantConfig) -> Result<i8> {
    if config.scheme != QuantScheme::PoT {
        return Err(Error::Contract("pot_quantize requires a PoT config".into()));
    }
    if !x.is_finite() {
        return Err(Error::Domain(format!("cannot quantize non-finite value {x}")));
    }
    let m = x.abs() / config.scale;
    // Walk levels ascending and keep the last minimizer so exact ties break
    // toward the larger magnitude.
    let mut best_field = POT_ZERO_FIELD;
    let mut best_dist = m; // distance to level 0
    for k in (0..=POT_MAX_EXPONENT).rev() {
        let level = 2f32.powi(-(k as i32));
        let dist = (m - level).abs();
        if dist <= best_dist {
            best_dist = dist;
            best_field = k;
        }
    }
    if best_field == POT_ZERO_FIELD {
        // -0.0 and underflow-to-zero both land on the positive sentinel.
        return Ok(pot_pack(false, POT_ZERO_FIELD));
    }
    Ok(pot_pack(x < 0.0, best_field))
}

/// Inverse of [`pot_quantize`].
pub fn pot_dequantize(code: i8, config: &QuantConfig) -> Result<f32> {
    if config.scheme != QuantScheme::PoT {
        return Err(Error::Contract("pot_dequantize requires a PoT config".into()));
    }
    if !(0..16).contains(&(code as i16)) {
        return Err(Error::Contract(format!("PoT code {code} is not a packed nibble")));
    }
    Ok(pot_code_value(code, config.scale))
}

/// Row-scale rule: Fixed rows step so the row max hits the top code;
/// PoT rows scale so the top level (2^0) hits the row max.
/// All-zero rows fall back to scale 1 (codes are all zero regardless).
pub fn row_scale(weights: &[f32], scheme: QuantScheme, bits: u8) -> f32 {
    let max_abs = weights.iter().fold(0f32, |m, w| m.max(w.abs()));
    if max_abs == 0.0 {
        return 1.0;
    }
    match scheme {
        QuantScheme::Fixed => max_abs / (((1i32 << (bits - 1)) - 1) as f32),
        QuantScheme::PoT => max_abs,
    }
}

/// Quantizes a row elementwise under an explicit config.
pub fn quantize_row(weights: &[f32], config: &QuantConfig) -> Result<QuantizedRow> {
    if weights.is_empty() {
        return Err(Error::Domain("cannot quantize an empty row".into()));
    }
    let codes = match config.scheme {
        QuantScheme::Fixed => weights
            .iter()
            .map(|&w| fixed_quantize(w, config))
            .collect::<Result<Vec<_>>>()?,
        QuantScheme::PoT => weights
            .iter()
            .map(|&w| pot_quantize(w, config))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(QuantizedRow {
        config: *config,
        codes,
    })
}

/// Quantizes a row with the scale chosen by the row-scale rule.
pub fn quantize_row_auto(weights: &[f32], scheme: QuantScheme, bits: u8) -> Result<QuantizedRow> {
    if weights.is_empty() {
        return Err(Error::Domain("cannot quantize an empty row".into()));
    }
    let config = QuantConfig::new(scheme, bits, row_scale(weights, scheme, bits))?;
    quantize_row(weights, &config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(bits: u8, scale: f32) -> QuantConfig {
        QuantConfig::new(QuantScheme::Fixed, bits, scale).unwrap()
    }

    fn pot(scale: f32) -> QuantConfig {
        QuantConfig::new(QuantScheme::PoT, 4, scale).unwrap()
    }

    /// All 15 signed PoT values under a scale, for brute-force checks.
    fn signed_pot_levels(scale: f32) -> Vec<(f32, i8)> {
        let mut out = vec![(0.0, pot_pack(false, POT_ZERO_FIELD))];
        for k in 0..=POT_MAX_EXPONENT {
            let mag = scale * 2f32.powi(-(k as i32));
            out.push((mag, pot_pack(false, k)));
            out.push((-mag, pot_pack(true, k)));
        }
        out
    }

    #[test]
    fn config_invariants() {
        assert!(QuantConfig::new(QuantScheme::Fixed, 8, 0.5).is_ok());
        assert!(QuantConfig::new(QuantScheme::Fixed, 6, 0.5).is_err());
        assert!(QuantConfig::new(QuantScheme::Fixed, 4, 0.0).is_err());
        assert!(QuantConfig::new(QuantScheme::Fixed, 4, f32::INFINITY).is_err());
        // 8-bit PoT is never used and is rejected up front.
        assert!(QuantConfig::new(QuantScheme::PoT, 8, 1.0).is_err());
    }

    #[test]
    fn scheme_serializes_to_lowercase_tags() {
        assert_eq!(serde_json::to_string(&QuantScheme::Fixed).unwrap(), "\"fixed\"");
        assert_eq!(serde_json::to_string(&QuantScheme::PoT).unwrap(), "\"pot\"");
    }

    #[test]
    fn fixed_quantize_examples() {
        let c = fixed(4, 0.25);
        assert_eq!(fixed_quantize(0.0, &c).unwrap(), 0);
        assert_eq!(fixed_quantize(3.0 * 0.25, &c).unwrap(), 3);
        // saturation at 2^3 - 1
        assert_eq!(fixed_quantize(100.0 * 0.25, &c).unwrap(), 7);
        assert_eq!(fixed_quantize(-100.0, &c).unwrap(), -7);
        assert!(fixed_quantize(f32::NAN, &c).is_err());
    }

    #[test]
    fn fixed_rounds_half_away_from_zero() {
        let c = fixed(4, 1.0);
        assert_eq!(fixed_quantize(3.5, &c).unwrap(), 4);
        assert_eq!(fixed_quantize(-3.5, &c).unwrap(), -4);
        assert_eq!(fixed_quantize(0.5, &c).unwrap(), 1);
        assert_eq!(fixed_quantize(-0.5, &c).unwrap(), -1);
    }

    #[test]
    fn fixed_dequantize_examples() {
        let c = fixed(4, 0.5);
        assert_eq!(fixed_dequantize(0, &c).unwrap(), 0.0);
        assert_eq!(fixed_dequantize(-7, &c).unwrap(), -3.5);
        assert!(fixed_dequantize(8, &c).is_err());
    }

    #[test]
    fn fixed_round_trip_lands_on_nearest_grid_point() {
        // Brute force over all 15 levels of a 4-bit grid.
        let c = fixed(4, 0.3);
        let mut x = -2.5f32;
        while x < 2.5 {
            let deq = fixed_dequantize(fixed_quantize(x, &c).unwrap(), &c).unwrap();
            let nearest = (-7..=7)
                .map(|k| k as f32 * c.scale)
                .min_by(|a, b| {
                    let da = (x - a).abs();
                    let db = (x - b).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert!(
                (deq - nearest).abs() <= c.scale * 0.5 + 1e-6,
                "x={x} deq={deq} nearest={nearest}"
            );
            x += 0.0371;
        }
    }

    #[test]
    fn codebook_layout() {
        let cb = pot_codebook(4).unwrap();
        let expected = [
            0.0,
            1.0 / 64.0,
            1.0 / 32.0,
            1.0 / 16.0,
            1.0 / 8.0,
            1.0 / 4.0,
            1.0 / 2.0,
            1.0,
        ];
        assert_eq!(cb.levels.len(), 8);
        assert_eq!(cb.levels, expected);
        assert!(cb.levels.windows(2).all(|w| w[0] < w[1]));
        assert!(pot_codebook(8).is_err());
    }

    #[test]
    fn pot_quantize_examples() {
        let c = pot(1.0);
        // exactly representable
        assert_eq!(pot_quantize(0.5, &c).unwrap(), pot_pack(false, 1));
        // zero sentinel, from both zero signs
        assert_eq!(pot_quantize(0.0, &c).unwrap(), pot_pack(false, POT_ZERO_FIELD));
        assert_eq!(pot_quantize(-0.0, &c).unwrap(), pot_pack(false, POT_ZERO_FIELD));
        // 0.3 is nearer 0.25 than 0.5 — cross-checked by brute force below
        assert_eq!(pot_quantize(0.3, &c).unwrap(), pot_pack(false, 2));
        let best = signed_pot_levels(1.0)
            .into_iter()
            .min_by(|a, b| (0.3 - a.0).abs().partial_cmp(&(0.3 - b.0).abs()).unwrap())
            .unwrap();
        assert_eq!(pot_dequantize(pot_quantize(0.3, &c).unwrap(), &c).unwrap(), best.0);
    }

    #[test]
    fn pot_ties_break_toward_larger_magnitude() {
        let c = pot(1.0);
        // 0.75 is equidistant from 0.5 and 1.0
        assert_eq!(pot_quantize(0.75, &c).unwrap(), pot_pack(false, 0));
        // (0 + 1/64)/2 is equidistant from 0 and 1/64
        assert_eq!(pot_quantize(1.0 / 128.0, &c).unwrap(), pot_pack(false, 6));
        assert_eq!(pot_quantize(-0.75, &c).unwrap(), pot_pack(true, 0));
    }

    #[test]
    fn quantize_row_examples() {
        let zeros = [0.0f32; 5];
        let r = quantize_row_auto(&zeros, QuantScheme::Fixed, 4).unwrap();
        assert!(r.codes.iter().all(|&c| c == 0));
        let r = quantize_row_auto(&zeros, QuantScheme::PoT, 4).unwrap();
        assert!(r.dequantize().iter().all(|&v| v == 0.0));

        let s = 0.125f32;
        let row = [s, -2.0 * s, 3.0 * s];
        let cfg = fixed(4, s);
        let r = quantize_row(&row, &cfg).unwrap();
        assert_eq!(r.codes, vec![1, -2, 3]);

        assert!(quantize_row(&[], &cfg).is_err());
    }

    #[test]
    fn row_mse_matches_exhaustive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let row: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.5f32..1.5)).collect();
        for scheme in [QuantScheme::Fixed, QuantScheme::PoT] {
            let q = quantize_row_auto(&row, scheme, 4).unwrap();
            let deq = q.dequantize();
            let mse: f64 = row
                .iter()
                .zip(&deq)
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum();
            // oracle: nearest signed level, exhaustively
            let scale = q.config.scale;
            let levels: Vec<f32> = match scheme {
                QuantScheme::Fixed => (-7..=7).map(|k| k as f32 * scale).collect(),
                QuantScheme::PoT => signed_pot_levels(scale).into_iter().map(|(v, _)| v).collect(),
            };
            let oracle_mse: f64 = row
                .iter()
                .map(|&x| {
                    let best = levels
                        .iter()
                        .map(|&l| ((x - l) as f64).powi(2))
                        .fold(f64::INFINITY, f64::min);
                    best
                })
                .sum();
            assert!(
                (mse - oracle_mse).abs() < 1e-9,
                "{scheme:?}: mse {mse} vs oracle {oracle_mse}"
            );
        }
    }

    #[test]
    fn quantized_row_validation() {
        let c = fixed(4, 1.0);
        assert!(QuantizedRow::new(c, vec![7, -7, 0]).is_ok());
        assert!(QuantizedRow::new(c, vec![8]).is_err());
        let p = pot(1.0);
        assert!(QuantizedRow::new(p, vec![pot_pack(true, 3)]).is_ok());
        assert!(QuantizedRow::new(p, vec![pot_pack(true, POT_ZERO_FIELD)]).is_err());
        assert!(QuantizedRow::new(p, vec![16]).is_err());
    }
}
