//! LUT-based fixed-point softmax.
//!
//! `e^x` comes from a 256-entry table indexed by the 8-bit input code. A
//! vector is processed in `lanes`-wide chunks: on load the vector max is
//! subtracted (so every table argument is <= 0), then one cycle per chunk
//! accumulates the exponent sum and one cycle per chunk normalizes. Outputs
//! are unsigned Q0.8 probabilities.

use std::fmt::Write as _;

use crate::config::{AttentionConfig, PROBABILITY_FRACTION_BITS};
use crate::error::{Result, SimError};
use crate::numerics::{
    dequantize, quantize, round_half_even_div, saturate_signed, FixedWord, QFormat,
};

pub const LUT_ENTRIES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpLut {
    entries: Vec<u16>,
    in_format: QFormat,
    out_format: QFormat,
}

impl ExpLut {
    pub fn entries(&self) -> &[u16] {
        &self.entries
    }

    pub fn in_format(&self) -> QFormat {
        self.in_format
    }

    pub fn out_format(&self) -> QFormat {
        self.out_format
    }

    /// One `"index value"` line per entry, in index order.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(LUT_ENTRIES * 10);
        for (i, v) in self.entries.iter().enumerate() {
            writeln!(s, "{i} {v}").expect("write to String");
        }
        s
    }
}

/// Builds the exponent table: `entry(code) = quantize(e^(code * scale_in))`.
pub fn generate_exp_lut(in_format: QFormat, out_format: QFormat) -> Result<ExpLut> {
    if !(in_format.is_signed() && in_format.width() == 8) {
        return Err(SimError::InvalidArgument(format!(
            "LUT input format {in_format} must be signed 8-bit"
        )));
    }
    if out_format.is_signed() || out_format.width() != 16 {
        return Err(SimError::InvalidArgument(format!(
            "LUT output format {out_format} must be unsigned 16-bit"
        )));
    }
    let entries = (0..LUT_ENTRIES)
        .map(|index| {
            let code = index as u8 as i8 as i64;
            let x = dequantize(FixedWord::new(code, in_format)?);
            Ok(quantize(x.exp(), out_format)?.raw() as u16)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpLut {
        entries,
        in_format,
        out_format,
    })
}

pub fn exp_lookup(lut: &ExpLut, x: i8) -> u16 {
    lut.entries[x as u8 as usize]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SoftmaxPhase {
    Idle,
    SumPhase,
    NormalizePhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxState {
    pub phase: SoftmaxPhase,
    pub lane_count: usize,
    pub accumulator: u64,
    pub chunk: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SoftmaxControl<'a> {
    pub cs: bool,
    pub reset: bool,
    pub enable: bool,
    pub data_in: &'a [i8],
}

impl<'a> SoftmaxControl<'a> {
    pub fn idle() -> Self {
        Self {
            cs: true,
            reset: false,
            enable: false,
            data_in: &[],
        }
    }

    pub fn start(data_in: &'a [i8]) -> Self {
        Self {
            enable: true,
            data_in,
            ..Self::idle()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftmaxOutputs {
    pub done: bool,
    pub data_out: Option<Vec<u8>>,
    pub started: bool,
}

#[derive(Debug, Clone)]
pub struct Softmax {
    lut: ExpLut,
    state: SoftmaxState,
    shifted: Vec<i8>,
    exps: Vec<u16>,
}

impl Softmax {
    pub fn new(lut: ExpLut, lanes: usize) -> Result<Self> {
        if lanes == 0 {
            return Err(SimError::InvalidArgument(
                "softmax needs at least one lane".into(),
            ));
        }
        Ok(Self {
            lut,
            state: SoftmaxState {
                phase: SoftmaxPhase::Idle,
                lane_count: lanes,
                accumulator: 0,
                chunk: 0,
            },
            shifted: Vec::new(),
            exps: Vec::new(),
        })
    }

    pub fn from_attention(config: &AttentionConfig) -> Result<Self> {
        let lut = generate_exp_lut(config.lut_in_format, config.lut_out_format)?;
        Self::new(lut, config.softmax_lanes)
    }

    pub fn lut(&self) -> &ExpLut {
        &self.lut
    }

    pub fn state(&self) -> &SoftmaxState {
        &self.state
    }

    pub fn lanes(&self) -> usize {
        self.state.lane_count
    }

    pub fn is_idle(&self) -> bool {
        self.state.phase == SoftmaxPhase::Idle
    }

    /// Compute cycles for an `n`-element vector.
    pub fn cycles_for(&self, n: usize) -> u64 {
        2 * n.div_ceil(self.state.lane_count) as u64
    }

    fn chunks(&self) -> usize {
        self.shifted.len().div_ceil(self.state.lane_count)
    }

    fn chunk_range(&self) -> std::ops::Range<usize> {
        let lanes = self.state.lane_count;
        let start = self.state.chunk * lanes;
        start..(start + lanes).min(self.shifted.len())
    }

    fn reset(&mut self) {
        self.state.phase = SoftmaxPhase::Idle;
        self.state.accumulator = 0;
        self.state.chunk = 0;
        self.shifted.clear();
        self.exps.clear();
    }

    /// Advances one clock. `enable` is sampled only while idle; the load
    /// cycle also performs the first sum step.
    pub fn step(&mut self, ctl: &SoftmaxControl<'_>) -> Result<SoftmaxOutputs> {
        let mut out = SoftmaxOutputs::default();
        if ctl.reset {
            self.reset();
            return Ok(out);
        }
        if !ctl.cs {
            return Ok(out);
        }
        if self.state.phase == SoftmaxPhase::Idle {
            if !ctl.enable {
                return Ok(out);
            }
            if ctl.data_in.is_empty() {
                return Err(SimError::InvalidArgument(
                    "softmax of an empty vector".into(),
                ));
            }
            let max = *ctl.data_in.iter().max().expect("non-empty") as i64;
            self.shifted.clear();
            self.shifted.extend(
                ctl.data_in
                    .iter()
                    .map(|&v| saturate_signed(v as i64 - max, 8) as i8),
            );
            self.exps.clear();
            self.exps.resize(self.shifted.len(), 0);
            self.state.phase = SoftmaxPhase::SumPhase;
            self.state.accumulator = 0;
            self.state.chunk = 0;
            out.started = true;
        }
        match self.state.phase {
            SoftmaxPhase::SumPhase => {
                for i in self.chunk_range() {
                    let e = exp_lookup(&self.lut, self.shifted[i]);
                    self.exps[i] = e;
                    self.state.accumulator += e as u64;
                }
                self.state.chunk += 1;
                if self.state.chunk == self.chunks() {
                    self.state.phase = SoftmaxPhase::NormalizePhase;
                    self.state.chunk = 0;
                }
            }
            SoftmaxPhase::NormalizePhase => {
                self.state.chunk += 1;
                if self.state.chunk == self.chunks() {
                    let sum = self.state.accumulator as i128;
                    let probs = self
                        .exps
                        .iter()
                        .map(|&e| {
                            if sum == 0 {
                                0
                            } else {
                                round_half_even_div((e as i128) << PROBABILITY_FRACTION_BITS, sum)
                                    .clamp(0, 255) as u8
                            }
                        })
                        .collect();
                    out.data_out = Some(probs);
                    out.done = true;
                    self.reset();
                }
            }
            SoftmaxPhase::Idle => {}
        }
        Ok(out)
    }

    /// Softmax of `v` as Q0.8 codes; returns probabilities and cycles.
    pub fn softmax_vector(&mut self, v: &[i8]) -> Result<(Vec<u8>, u64)> {
        if !self.is_idle() {
            return Err(SimError::Busy("softmax"));
        }
        if v.is_empty() {
            return Err(SimError::InvalidArgument(
                "softmax of an empty vector".into(),
            ));
        }
        let mut out = self.step(&SoftmaxControl::start(v))?;
        let mut cycles = 1;
        while !out.done {
            out = self.step(&SoftmaxControl::idle())?;
            cycles += 1;
        }
        Ok((out.data_out.expect("softmax completes with data"), cycles))
    }
}
