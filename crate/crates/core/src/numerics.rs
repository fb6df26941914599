//! Fixed-point formats, quantization, saturating integer arithmetic and the
//! ADC conversion model shared by every datapath module.
//!
//! All rounding in the datapath is round-half-to-even.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Two's-complement (or unsigned) fixed-point format descriptor.
///
/// Written as `Qi.f` for signed and `UQi.f` for unsigned formats, where `i`
/// counts integer bits and `f` fraction bits. The sign bit is not counted in
/// `i`, so `Q0.7` is an 8-bit signed fraction and `UQ1.15` a 16-bit unsigned
/// word with `0x8000 == 1.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QFormat {
    signed: bool,
    integer_bits: u32,
    fraction_bits: u32,
}

impl QFormat {
    pub fn new(signed: bool, integer_bits: u32, fraction_bits: u32) -> Result<Self> {
        let width = signed as u32 + integer_bits + fraction_bits;
        if !(1..=32).contains(&width) {
            return Err(SimError::InvalidArgument(format!(
                "fixed-point width {width} outside 1..=32"
            )));
        }
        Ok(Self {
            signed,
            integer_bits,
            fraction_bits,
        })
    }

    pub const fn signed_q(integer_bits: u32, fraction_bits: u32) -> Self {
        Self {
            signed: true,
            integer_bits,
            fraction_bits,
        }
    }

    pub const fn unsigned_q(integer_bits: u32, fraction_bits: u32) -> Self {
        Self {
            signed: false,
            integer_bits,
            fraction_bits,
        }
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn integer_bits(&self) -> u32 {
        self.integer_bits
    }

    pub fn fraction_bits(&self) -> u32 {
        self.fraction_bits
    }

    pub fn width(&self) -> u32 {
        self.signed as u32 + self.integer_bits + self.fraction_bits
    }

    /// Value of one LSB.
    pub fn scale(&self) -> f64 {
        (-(self.fraction_bits as f64)).exp2()
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.integer_bits + self.fraction_bits))
        } else {
            0
        }
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.integer_bits + self.fraction_bits)) - 1
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.scale()
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.scale()
    }

    pub fn contains_code(&self, raw: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&raw)
    }

    pub fn saturate_code(&self, raw: i64) -> i64 {
        raw.clamp(self.min_code(), self.max_code())
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.signed { "Q" } else { "UQ" };
        write!(f, "{prefix}{}.{}", self.integer_bits, self.fraction_bits)
    }
}

impl FromStr for QFormat {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            SimError::InvalidArgument(format!("bad fixed-point format {s:?} (want Qi.f or UQi.f)"))
        };
        let (signed, body) = if let Some(rest) = s.strip_prefix("UQ") {
            (false, rest)
        } else if let Some(rest) = s.strip_prefix('Q') {
            (true, rest)
        } else {
            return Err(bad());
        };
        let (i, f) = body.split_once('.').ok_or_else(bad)?;
        let i: u32 = i.parse().map_err(|_| bad())?;
        let f: u32 = f.parse().map_err(|_| bad())?;
        QFormat::new(signed, i, f)
    }
}

impl TryFrom<String> for QFormat {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QFormat> for String {
    fn from(q: QFormat) -> String {
        q.to_string()
    }
}

/// A raw code tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedWord {
    raw: i64,
    format: QFormat,
}

impl FixedWord {
    pub fn new(raw: i64, format: QFormat) -> Result<Self> {
        if !format.contains_code(raw) {
            return Err(SimError::InvalidArgument(format!(
                "code {raw} not representable in {format}"
            )));
        }
        Ok(Self { raw, format })
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> QFormat {
        self.format
    }
}

/// Quantizes `value` onto `format`'s grid with round-half-to-even and
/// saturation. Non-finite inputs are rejected.
pub fn quantize(value: f64, format: QFormat) -> Result<FixedWord> {
    if !value.is_finite() {
        return Err(SimError::InvalidArgument(format!(
            "cannot quantize {value}"
        )));
    }
    let scaled = (value / format.scale()).round_ties_even();
    let raw = scaled.clamp(format.min_code() as f64, format.max_code() as f64) as i64;
    Ok(FixedWord { raw, format })
}

pub fn dequantize(word: FixedWord) -> f64 {
    word.raw as f64 * word.format.scale()
}

/// Clamps `value` to the signed `width`-bit range.
pub fn saturate_signed(value: i64, width: u32) -> i64 {
    debug_assert!((1..=63).contains(&width));
    let max = (1i64 << (width - 1)) - 1;
    value.clamp(-max - 1, max)
}

/// `acc + addend`, clamped to the signed `width`-bit range.
pub fn saturating_accumulate(acc: i64, addend: i64, width: u32) -> i64 {
    saturate_signed(acc.saturating_add(addend), width)
}

/// `num / den` rounded half-to-even. `den` must be positive.
pub fn round_half_even_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q & 1 == 1 => q + 1,
        _ => q,
    }
}

/// Arithmetic right shift with round-half-to-even, saturated to the signed
/// `width`-bit range. This is the requantizer that narrows wide accumulators
/// onto the 8-bit inter-module datapath.
pub fn shift_round_saturate(value: i64, shift: u32, width: u32) -> i64 {
    let rounded = if shift == 0 {
        value as i128
    } else {
        round_half_even_div(value as i128, 1i128 << shift.min(100))
    };
    saturate_signed(
        rounded.clamp(i64::MIN as i128, i64::MAX as i128) as i64,
        width,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdcMode {
    Ideal,
    Quantized,
}

impl FromStr for AdcMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(AdcMode::Ideal),
            "quantized" => Ok(AdcMode::Quantized),
            other => Err(SimError::InvalidArgument(format!(
                "unknown ADC mode {other:?}"
            ))),
        }
    }
}

/// Column ADC model. `full_scale` is the largest analog magnitude mapped
/// onto the code book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcConfig {
    pub mode: AdcMode,
    pub bits: u32,
    pub full_scale: i64,
}

/// 32 codes of 8064.
pub const DEFAULT_ADC_FULL_SCALE: i64 = 258_048;

impl AdcConfig {
    pub fn ideal() -> Self {
        Self {
            mode: AdcMode::Ideal,
            bits: 6,
            full_scale: DEFAULT_ADC_FULL_SCALE,
        }
    }

    pub fn quantized(bits: u32, full_scale: i64) -> Self {
        Self {
            mode: AdcMode::Quantized,
            bits,
            full_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.bits) {
            return Err(SimError::InvalidArgument(format!(
                "ADC bits {} outside 1..=32",
                self.bits
            )));
        }
        if self.full_scale <= 0 {
            return Err(SimError::InvalidArgument(
                "ADC full_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Quantizer step in analog-sum units.
    pub fn step(&self) -> f64 {
        self.full_scale as f64 / (1u64 << (self.bits - 1)) as f64
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }
}

/// Converts one analog column sum to its reconstructed digital value.
///
/// Ideal mode is the identity. Quantized mode picks the nearest code
/// `round(sum / step)` clamped to the signed `bits`-bit code book and
/// returns `code * step` (rounded to an integer when the step is fractional).
pub fn adc_convert(analog_sum: i64, adc: &AdcConfig) -> i64 {
    match adc.mode {
        AdcMode::Ideal => analog_sum,
        AdcMode::Quantized => {
            let levels = 1i128 << (adc.bits - 1);
            let full = adc.full_scale as i128;
            let code = round_half_even_div(analog_sum as i128 * levels, full)
                .clamp(adc.min_code() as i128, adc.max_code() as i128);
            round_half_even_div(code * full, levels) as i64
        }
    }
}
