//! QK^T engine.
//!
//! `seq_len / 32` col_cims, each a vertical stack of `d_k / 32` 32x32 APIMs,
//! together hold K^T as a weight-stationary `d_k x seq_len` array. Token
//! `j` lives in column `j % 32` of col_cim `j / 32`; dimension `d` lives in
//! row `d % 32` of stack `d / 32`.

use crate::config::AttentionConfig;
use crate::error::{check_index, check_len, Result, SimError};
use crate::input_process::STACK_SUM_BITS;
use crate::numerics::{saturating_accumulate, shift_round_saturate, AdcConfig};
use crate::pim_macro::{ApimGeometry, ApimMacro, StepScratch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreConfig {
    pub d_k: usize,
    pub seq_len: usize,
    pub geometry: ApimGeometry,
    pub adc: AdcConfig,
    pub k_load_cycles: usize,
}

impl ScoreConfig {
    pub fn from_attention(config: &AttentionConfig) -> Self {
        Self {
            d_k: config.d_k,
            seq_len: config.seq_len,
            geometry: config.score_apim,
            adc: config.adc,
            k_load_cycles: config.k_load_cycles,
        }
    }

    pub fn col_cims(&self) -> usize {
        self.seq_len.div_ceil(self.geometry.cols)
    }

    pub fn stacks(&self) -> usize {
        self.d_k / self.geometry.rows
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.adc.validate()?;
        let g = &self.geometry;
        if self.d_k == 0 || !self.d_k.is_multiple_of(g.rows) {
            return Err(SimError::InvalidArgument(format!(
                "d_k {} must be a non-zero multiple of {}",
                self.d_k, g.rows
            )));
        }
        if self.seq_len == 0 {
            return Err(SimError::InvalidArgument("seq_len must be non-zero".into()));
        }
        if self.k_load_cycles == 0 || self.k_load_cycles > g.rows {
            return Err(SimError::InvalidArgument(format!(
                "k_load_cycles {} outside 1..={}",
                self.k_load_cycles, g.rows
            )));
        }
        Ok(())
    }

    /// Q_mode latency: the stacked MVM steps plus one accumulate/requantize
    /// cycle.
    pub fn q_mode_cycles(&self) -> u64 {
        self.geometry.mvm_cycles() + 1
    }

    fn cells_per_load_cycle(&self) -> usize {
        self.geometry.rows.div_ceil(self.k_load_cycles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreFsm {
    Idle,
    KMode,
    QMode,
}

impl ScoreFsm {
    pub fn name(self) -> &'static str {
        match self {
            ScoreFsm::Idle => "idle",
            ScoreFsm::KMode => "k_mode",
            ScoreFsm::QMode => "q_mode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreState {
    pub state: ScoreFsm,
    pub pending_address: usize,
    pub cycle_counter: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreControl<'a> {
    pub cs: bool,
    pub reset: bool,
    pub k_mode_enable: bool,
    pub q_mode_enable: bool,
    pub k_address: usize,
    pub k_input: &'a [i8],
    pub q_input: &'a [i8],
}

impl<'a> ScoreControl<'a> {
    pub fn idle() -> Self {
        Self {
            cs: true,
            reset: false,
            k_mode_enable: false,
            q_mode_enable: false,
            k_address: 0,
            k_input: &[],
            q_input: &[],
        }
    }

    pub fn load_k(k_address: usize, k_input: &'a [i8]) -> Self {
        Self {
            k_mode_enable: true,
            k_address,
            k_input,
            ..Self::idle()
        }
    }

    pub fn query(q_input: &'a [i8]) -> Self {
        Self {
            q_mode_enable: true,
            q_input,
            ..Self::idle()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreOutputs {
    pub input_done: bool,
    pub output_done: bool,
    pub qk_output: Option<Vec<i8>>,
    pub started: Option<ScoreFsm>,
}

#[derive(Debug, Clone)]
pub struct Score {
    config: ScoreConfig,
    /// Indexed `col_cim * stacks + stack`.
    apims: Vec<ApimMacro>,
    state: ScoreState,
    requant_shift: u32,
    latched: Vec<i8>,
    acc: Vec<Vec<i64>>,
    k_loaded: Vec<bool>,
    scratch: StepScratch,
}

impl Score {
    pub fn new(config: ScoreConfig) -> Result<Self> {
        config.validate()?;
        let n = config.col_cims() * config.stacks();
        let apims = (0..n)
            .map(|_| ApimMacro::new(config.geometry, config.adc))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            apims,
            state: ScoreState {
                state: ScoreFsm::Idle,
                pending_address: 0,
                cycle_counter: 0,
            },
            requant_shift: 0,
            latched: Vec::new(),
            acc: vec![vec![0; config.geometry.cols]; n],
            k_loaded: vec![false; config.seq_len],
            scratch: StepScratch::default(),
        })
    }

    pub fn config(&self) -> &ScoreConfig {
        &self.config
    }

    pub fn state(&self) -> &ScoreState {
        &self.state
    }

    pub fn is_idle(&self) -> bool {
        self.state.state == ScoreFsm::Idle
    }

    pub fn set_requant_shift(&mut self, shift: u32) {
        self.requant_shift = shift;
    }

    pub fn all_k_loaded(&self) -> bool {
        self.k_loaded.iter().all(|&b| b)
    }

    pub fn max_cell_writes(&self) -> u32 {
        self.apims
            .iter()
            .map(ApimMacro::max_write_count)
            .max()
            .unwrap_or(0)
    }

    fn apim_index(&self, col_cim: usize, stack: usize) -> usize {
        col_cim * self.config.stacks() + stack
    }

    /// The K row stored for `token`, read back from the array.
    pub fn stored_k(&self, token: usize) -> Result<Vec<i8>> {
        check_index("K_address", token, self.config.seq_len)?;
        let g = self.config.geometry;
        let (cc, col) = (token / g.cols, token % g.cols);
        let mut out = Vec::with_capacity(self.config.d_k);
        for s in 0..self.config.stacks() {
            let apim = &self.apims[self.apim_index(cc, s)];
            for r in 0..g.rows {
                out.push(apim.read_cell(r, col)?);
            }
        }
        Ok(out)
    }

    fn reset(&mut self) {
        self.state = ScoreState {
            state: ScoreFsm::Idle,
            pending_address: 0,
            cycle_counter: 0,
        };
        self.latched.clear();
    }

    /// Advances one clock. Enables are sampled only in State0 (idle); if both
    /// are raised together the cycle is a no-op. `input_done` marks the end of
    /// a K_mode load and `output_done` the end of a Q_mode row.
    pub fn step(&mut self, ctl: &ScoreControl<'_>) -> Result<ScoreOutputs> {
        let mut out = ScoreOutputs::default();
        if ctl.reset {
            self.reset();
            return Ok(out);
        }
        if !ctl.cs {
            return Ok(out);
        }
        if self.state.state == ScoreFsm::Idle {
            match (ctl.k_mode_enable, ctl.q_mode_enable) {
                (true, false) => {
                    check_index("K_address", ctl.k_address, self.config.seq_len)?;
                    check_len("K_input", ctl.k_input.len(), self.config.d_k)?;
                    self.latched.clear();
                    self.latched.extend_from_slice(ctl.k_input);
                    self.state.state = ScoreFsm::KMode;
                    self.state.pending_address = ctl.k_address;
                }
                (false, true) => {
                    check_len("Q_input", ctl.q_input.len(), self.config.d_k)?;
                    self.latched.clear();
                    self.latched.extend_from_slice(ctl.q_input);
                    for a in &mut self.acc {
                        a.iter_mut().for_each(|v| *v = 0);
                    }
                    self.state.state = ScoreFsm::QMode;
                }
                _ => return Ok(out),
            }
            self.state.cycle_counter = 0;
            out.started = Some(self.state.state);
        }
        match self.state.state {
            ScoreFsm::KMode => self.k_cycle(&mut out)?,
            ScoreFsm::QMode => self.q_cycle(&mut out)?,
            ScoreFsm::Idle => {}
        }
        Ok(out)
    }

    fn k_cycle(&mut self, out: &mut ScoreOutputs) -> Result<()> {
        let g = self.config.geometry;
        let per = self.config.cells_per_load_cycle();
        let i = self.state.cycle_counter as usize;
        let token = self.state.pending_address;
        let (cc, col) = (token / g.cols, token % g.cols);
        let rows = (i * per).min(g.rows)..((i + 1) * per).min(g.rows);
        for s in 0..self.config.stacks() {
            let idx = self.apim_index(cc, s);
            for r in rows.clone() {
                self.apims[idx].write_cell(r, col, self.latched[s * g.rows + r])?;
            }
        }
        self.state.cycle_counter += 1;
        if self.state.cycle_counter == self.config.k_load_cycles as u64 {
            self.k_loaded[token] = true;
            out.input_done = true;
            self.state.state = ScoreFsm::Idle;
            self.state.cycle_counter = 0;
        }
        Ok(())
    }

    fn q_cycle(&mut self, out: &mut ScoreOutputs) -> Result<()> {
        let g = self.config.geometry;
        let steps = g.mvm_cycles();
        let i = self.state.cycle_counter;
        if i < steps {
            let (rs, cg) = g.step_coords(i as usize);
            let stacks = self.config.stacks();
            for (idx, apim) in self.apims.iter().enumerate() {
                let s = idx % stacks;
                let q = &self.latched[s * g.rows..(s + 1) * g.rows];
                apim.accumulate_step(q, rs, cg, &mut self.acc[idx], &mut self.scratch)?;
            }
            self.state.cycle_counter += 1;
            return Ok(());
        }
        let stacks = self.config.stacks();
        let row = (0..self.config.seq_len)
            .map(|j| {
                let (cc, col) = (j / g.cols, j % g.cols);
                let sum = (0..stacks).fold(0i64, |acc, s| {
                    saturating_accumulate(acc, self.acc[cc * stacks + s][col], STACK_SUM_BITS)
                });
                shift_round_saturate(sum, self.requant_shift, 8) as i8
            })
            .collect();
        out.qk_output = Some(row);
        out.output_done = true;
        self.state.state = ScoreFsm::Idle;
        self.state.cycle_counter = 0;
        Ok(())
    }

    fn require_idle(&self) -> Result<()> {
        if self.is_idle() {
            Ok(())
        } else {
            Err(SimError::Busy("score"))
        }
    }

    /// Stores `k_row` as token `k_address`; returns cycles.
    pub fn load_k_row(&mut self, k_address: usize, k_row: &[i8]) -> Result<u64> {
        self.require_idle()?;
        check_index("K_address", k_address, self.config.seq_len)?;
        check_len("K row", k_row.len(), self.config.d_k)?;
        let mut out = self.step(&ScoreControl::load_k(k_address, k_row))?;
        let mut cycles = 1;
        while !out.input_done {
            out = self.step(&ScoreControl::idle())?;
            cycles += 1;
        }
        Ok(cycles)
    }

    /// One `seq_len`-wide row of requantized `q . K^T`; returns the row and
    /// cycles.
    pub fn compute_score_row(&mut self, q_row: &[i8]) -> Result<(Vec<i8>, u64)> {
        self.require_idle()?;
        check_len("Q row", q_row.len(), self.config.d_k)?;
        if !self.all_k_loaded() {
            return Err(SimError::Precondition("K^T not fully loaded".into()));
        }
        let mut out = self.step(&ScoreControl::query(q_row))?;
        let mut cycles = 1;
        while !out.output_done {
            out = self.step(&ScoreControl::idle())?;
            cycles += 1;
        }
        Ok((out.qk_output.expect("Q_mode completes with data"), cycles))
    }
}
