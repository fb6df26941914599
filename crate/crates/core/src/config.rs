//! Run configuration, named presets, and requantization-shift resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::input_process::Bank;
use crate::numerics::{shift_round_saturate, AdcConfig, QFormat};
use crate::pim_macro::ApimGeometry;
use crate::workload::{Int8Matrix, Workload};

/// Fraction bits of the unsigned 8-bit softmax probabilities.
pub const PROBABILITY_FRACTION_BITS: u32 = 8;

/// Requantization shifts. `None` selects automatic resolution (see
/// [`resolve_shifts`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Right shift applied to projection sums (all three banks).
    pub projection: Option<u32>,
    /// Total right shift applied to score sums, including the folded
    /// `1/sqrt(d_k)`.
    pub score: Option<u32>,
    /// Right shift applied to probability-weighted value sums.
    pub value: u32,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            projection: None,
            score: None,
            value: PROBABILITY_FRACTION_BITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub preset: String,
    pub d_model: usize,
    pub d_k: usize,
    pub seq_len: usize,
    pub input_apim: ApimGeometry,
    pub score_apim: ApimGeometry,
    pub adc: AdcConfig,
    pub shifts: ShiftConfig,
    pub lut_in_format: QFormat,
    pub lut_out_format: QFormat,
    pub softmax_lanes: usize,
    pub bus_width: u32,
    /// Overlap score, softmax and projections inside the per-token loop.
    pub pipeline: bool,
    /// Cycles to write one K row into the score array.
    pub k_load_cycles: usize,
    /// Per-token latency charged to the functional value stage.
    pub value_latency: u64,
}

impl AttentionConfig {
    pub const PRESETS: [&'static str; 2] = ["paper-default", "desk-small"];

    fn base(preset: &str, d_model: usize, d_k: usize, seq_len: usize) -> Self {
        Self {
            preset: preset.to_string(),
            d_model,
            d_k,
            seq_len,
            input_apim: ApimGeometry::input_process_default(),
            score_apim: ApimGeometry::score_default(),
            adc: AdcConfig::ideal(),
            shifts: ShiftConfig::default(),
            lut_in_format: QFormat::signed_q(4, 3),
            lut_out_format: QFormat::unsigned_q(1, 15),
            softmax_lanes: 32,
            bus_width: 64,
            pipeline: true,
            k_load_cycles: 32,
            value_latency: 0,
        }
    }

    /// 32 APIMs of 128x128 per bank, 2048-token score array.
    pub fn paper_default() -> Self {
        Self::base("paper-default", 4096, 128, 2048)
    }

    /// One 128x128 APIM per bank and a single 32x32 score APIM.
    pub fn desk_small() -> Self {
        Self::base("desk-small", 128, 32, 32)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-default" => Ok(Self::paper_default()),
            "desk-small" => Ok(Self::desk_small()),
            other => Err(SimError::InvalidArgument(format!(
                "unknown preset {other:?} (known: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn macros_per_bank(&self) -> usize {
        self.d_model / self.input_apim.rows
    }

    pub fn score_col_cims(&self) -> usize {
        self.seq_len.div_ceil(self.score_apim.cols)
    }

    pub fn score_stacks(&self) -> usize {
        self.d_k / self.score_apim.rows
    }

    /// Width of the score module's K address port.
    pub fn k_address_bits(&self) -> u32 {
        usize::BITS - (self.seq_len.max(2) - 1).leading_zeros()
    }

    pub fn softmax_chunks(&self, n: usize) -> usize {
        n.div_ceil(self.softmax_lanes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::InvalidArgument(m));
        self.input_apim.validate()?;
        self.score_apim.validate()?;
        self.adc.validate()?;
        if self.d_model == 0 || self.d_k == 0 || self.seq_len == 0 {
            return bad("d_model, d_k and seq_len must be non-zero".into());
        }
        if !self.d_model.is_multiple_of(self.input_apim.rows) {
            return bad(format!(
                "d_model {} is not a multiple of the {}-row input APIM",
                self.d_model, self.input_apim.rows
            ));
        }
        if self.d_k > self.input_apim.cols {
            return bad(format!(
                "d_k {} exceeds {} APIM columns",
                self.d_k, self.input_apim.cols
            ));
        }
        if !self.d_k.is_multiple_of(self.score_apim.rows) {
            return bad(format!(
                "d_k {} is not a multiple of the {}-row score APIM",
                self.d_k, self.score_apim.rows
            ));
        }
        if !(self.lut_in_format.is_signed() && self.lut_in_format.width() == 8) {
            return bad(format!(
                "LUT input format {} must be signed 8-bit",
                self.lut_in_format
            ));
        }
        if self.lut_out_format.is_signed() || self.lut_out_format.width() != 16 {
            return bad(format!(
                "LUT output format {} must be unsigned 16-bit",
                self.lut_out_format
            ));
        }
        if self.softmax_lanes == 0 {
            return bad("softmax_lanes must be non-zero".into());
        }
        if !(8..=64).contains(&self.bus_width) || !self.bus_width.is_multiple_of(8) {
            return bad(format!(
                "bus width {} must be a multiple of 8 in 8..=64",
                self.bus_width
            ));
        }
        if self.k_load_cycles == 0 || self.k_load_cycles > self.score_apim.rows {
            return bad(format!(
                "k_load_cycles {} outside 1..={}",
                self.k_load_cycles, self.score_apim.rows
            ));
        }
        if self.shifts.value > 62
            || self.shifts.projection.is_some_and(|s| s > 62)
            || self.shifts.score.is_some_and(|s| s > 62)
        {
            return bad("requantization shifts must be <= 62".into());
        }
        Ok(())
    }
}

/// Shifts and derived scales fixed for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedShifts {
    /// Per bank, indexed by [`Bank::index`].
    pub projection: [u32; 3],
    pub score: u32,
    pub value: u32,
    /// Real value of one code of q, k, v.
    pub projection_scales: [f64; 3],
    /// Effective LUT-argument scale divided by the exact `1/sqrt(d_k)`
    /// scale; 1.0 when the power-of-two shift is exact.
    pub score_scale_residual: f64,
    /// Real value of one output code.
    pub output_scale: f64,
}

impl ResolvedShifts {
    pub fn projection(&self, bank: Bank) -> u32 {
        self.projection[bank.index()]
    }
}

/// Exact integer `x . W[:, c]` for every token and column, reduced to the
/// extreme values.
fn projection_extremes(tokens: &Int8Matrix, w: &Int8Matrix) -> (i64, i64) {
    let d_k = w.cols();
    let mut lo = 0i64;
    let mut hi = 0i64;
    let mut acc = vec![0i32; d_k];
    for t in 0..tokens.rows() {
        acc.iter_mut().for_each(|a| *a = 0);
        for (r, &x) in tokens.row(t).iter().enumerate() {
            let x = x as i32;
            for (a, &wv) in acc.iter_mut().zip(w.row(r)) {
                *a += x * wv as i32;
            }
        }
        for &a in &acc {
            lo = lo.min(a as i64);
            hi = hi.max(a as i64);
        }
    }
    (lo, hi)
}

/// Smallest shift that keeps both extremes inside int8 after rounding.
fn min_nonsaturating_shift(lo: i64, hi: i64) -> u32 {
    (0..=62)
        .find(|&s| {
            let a = shift_round_saturate(hi, s, 8);
            let b = shift_round_saturate(lo, s, 8);
            a == crate::numerics::round_half_even_div(hi as i128, 1i128 << s) as i64
                && b == crate::numerics::round_half_even_div(lo as i128, 1i128 << s) as i64
        })
        .unwrap_or(62)
}

/// Fixes every requantization shift for a run.
///
/// * Projection (auto): per bank, the smallest shift under which no exact
///   projection sum over the run's tokens saturates int8.
/// * Score (auto): maps `q . k / sqrt(d_k)` onto the LUT input grid. With
///   `s_q`, `s_k` the real values of one q/k code and `f` the LUT input
///   fraction bits, the exact shift is `log2(sqrt(d_k)) - f - log2(s_q s_k)`;
///   it is rounded to the nearest integer (ties up) and clamped at zero. The
///   leftover factor is reported as `score_scale_residual`.
/// * Value: taken from the config.
pub fn resolve_shifts(config: &AttentionConfig, workload: &Workload) -> Result<ResolvedShifts> {
    config.validate()?;
    workload.validate(config)?;
    let x_scale = workload.tokens.scale();
    let mut projection = [0u32; 3];
    let mut projection_scales = [0f64; 3];
    for bank in Bank::ALL {
        let w = workload.weights.bank(bank);
        let s = match config.shifts.projection {
            Some(s) => s,
            None => {
                let (lo, hi) = projection_extremes(&workload.tokens, w);
                min_nonsaturating_shift(lo, hi)
            }
        };
        projection[bank.index()] = s;
        projection_scales[bank.index()] = x_scale * w.scale() * (s as f64).exp2();
    }
    let qk_scale = projection_scales[Bank::Q.index()] * projection_scales[Bank::K.index()];
    let lut_frac = config.lut_in_format.fraction_bits() as f64;
    let sqrt_dk = (config.d_k as f64).sqrt();
    let score = match config.shifts.score {
        Some(s) => s,
        None => {
            let exact = sqrt_dk.log2() - lut_frac - qk_scale.log2();
            (exact + 0.5).floor().clamp(0.0, 62.0) as u32
        }
    };
    // LUT argument per unit of (q_code . k_code), relative to the ideal.
    let effective = (-(score as f64) - lut_frac).exp2();
    let ideal = qk_scale / sqrt_dk;
    let score_scale_residual = effective / ideal;
    let value = config.shifts.value;
    let output_scale = projection_scales[Bank::V.index()]
        * (value as f64 - PROBABILITY_FRACTION_BITS as f64).exp2();
    Ok(ResolvedShifts {
        projection,
        score,
        value,
        projection_scales,
        score_scale_residual,
        output_scale,
    })
}
