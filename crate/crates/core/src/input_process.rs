//! Q/K/V projection engine.
//!
//! Three weight banks, each a vertical stack of APIM macros holding one
//! `d_model x d_k` matrix, behind a clocked IDLE/WRITE/READ/CIM controller.
//! Macro `m` of a bank stores weight rows `[m * rows, (m + 1) * rows)`.

use serde::{Deserialize, Serialize};

use crate::config::AttentionConfig;
use crate::error::{check_index, check_len, Result, SimError};
use crate::numerics::{saturating_accumulate, shift_round_saturate, AdcConfig};
use crate::pim_macro::{ApimGeometry, ApimMacro, StepScratch};

/// Width of the adder that sums macro outputs across a bank's stack.
pub const STACK_SUM_BITS: u32 = 32;

/// Weight matrix selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bank {
    Q,
    K,
    V,
}

impl Bank {
    pub const ALL: [Bank; 3] = [Bank::Q, Bank::K, Bank::V];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `weight_sel` port encoding: Q = 0b00, K = 0b01, V = 0b10.
    pub fn weight_sel(self) -> u8 {
        match self {
            Bank::Q => 0b00,
            Bank::K => 0b01,
            Bank::V => 0b10,
        }
    }

    /// Decodes the 3-bit `weight_sel` port. Bit 2 is reserved and must be
    /// zero; `0b11` is unassigned.
    pub fn from_weight_sel(bits: u8) -> Option<Bank> {
        match bits {
            0b00 => Some(Bank::Q),
            0b01 => Some(Bank::K),
            0b10 => Some(Bank::V),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bank::Q => "q",
            Bank::K => "k",
            Bank::V => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Write,
    Read,
    Cim,
}

impl Mode {
    /// Mode select from the active-low `(web, cimeb)` pair.
    pub fn decode(web: bool, cimeb: bool) -> Mode {
        match (web, cimeb) {
            (true, true) => Mode::Read,
            (false, true) => Mode::Write,
            (false, false) => Mode::Idle,
            (true, false) => Mode::Cim,
        }
    }

    pub fn encode(self) -> (bool, bool) {
        match self {
            Mode::Read => (true, true),
            Mode::Write => (false, true),
            Mode::Idle => (false, false),
            Mode::Cim => (true, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Idle => "idle",
            Mode::Write => "write",
            Mode::Read => "read",
            Mode::Cim => "cim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputProcessConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub geometry: ApimGeometry,
    pub adc: AdcConfig,
}

impl InputProcessConfig {
    pub fn from_attention(config: &AttentionConfig) -> Self {
        Self {
            d_model: config.d_model,
            d_k: config.d_k,
            geometry: config.input_apim,
            adc: config.adc,
        }
    }

    pub fn macros_per_bank(&self) -> usize {
        self.d_model / self.geometry.rows
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.adc.validate()?;
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.geometry.rows) {
            return Err(SimError::InvalidArgument(format!(
                "d_model {} must be a non-zero multiple of {}",
                self.d_model, self.geometry.rows
            )));
        }
        if self.d_k == 0 || self.d_k > self.geometry.cols {
            return Err(SimError::InvalidArgument(format!(
                "d_k {} outside 1..={}",
                self.d_k, self.geometry.cols
            )));
        }
        Ok(())
    }

    pub fn column_cycles(&self) -> u64 {
        self.geometry.rows as u64
    }

    pub fn cim_cycles(&self) -> u64 {
        self.geometry.mvm_cycles()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputProcessState {
    pub mode: Mode,
    pub busy: bool,
    pub cycle_counter: u64,
    pub selected_bank: Bank,
}

#[derive(Debug, Clone)]
pub struct WeightBank {
    pub bank: Bank,
    pub macros: Vec<ApimMacro>,
}

/// One cycle of port inputs.
#[derive(Debug, Clone, Copy)]
pub struct InputProcessControl<'a> {
    pub cs: bool,
    pub rst: bool,
    pub web: bool,
    pub cimeb: bool,
    pub weight_sel: u8,
    pub col_sel: usize,
    pub data_in: &'a [i8],
}

impl<'a> InputProcessControl<'a> {
    pub fn idle() -> Self {
        Self {
            cs: true,
            rst: false,
            web: false,
            cimeb: false,
            weight_sel: 0,
            col_sel: 0,
            data_in: &[],
        }
    }

    pub fn command(mode: Mode, bank: Bank, col_sel: usize, data_in: &'a [i8]) -> Self {
        let (web, cimeb) = mode.encode();
        Self {
            web,
            cimeb,
            weight_sel: bank.weight_sel(),
            col_sel,
            data_in,
            ..Self::idle()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputProcessOutputs {
    pub done: bool,
    /// Projection row, present on the CIM completion cycle.
    pub data_out: Option<Vec<i8>>,
    /// Read-back column, present on the READ completion cycle.
    pub mem_data_out: Option<Vec<i8>>,
    /// Mode of an operation accepted this cycle.
    pub started: Option<Mode>,
}

#[derive(Debug, Clone)]
pub struct InputProcess {
    config: InputProcessConfig,
    banks: Vec<WeightBank>,
    state: InputProcessState,
    requant_shift: [u32; 3],
    col_sel: usize,
    latched: Vec<i8>,
    read_buffer: Vec<i8>,
    acc: Vec<Vec<i64>>,
    scratch: StepScratch,
}

impl InputProcess {
    pub fn new(config: InputProcessConfig) -> Result<Self> {
        config.validate()?;
        let n = config.macros_per_bank();
        let banks = Bank::ALL
            .iter()
            .map(|&bank| {
                let macros = (0..n)
                    .map(|_| ApimMacro::new(config.geometry, config.adc))
                    .collect::<Result<Vec<_>>>()?;
                Ok(WeightBank { bank, macros })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            banks,
            state: InputProcessState {
                mode: Mode::Idle,
                busy: false,
                cycle_counter: 0,
                selected_bank: Bank::Q,
            },
            requant_shift: [0; 3],
            col_sel: 0,
            latched: Vec::new(),
            read_buffer: vec![0; config.d_model],
            acc: vec![vec![0; config.geometry.cols]; n],
            scratch: StepScratch::default(),
        })
    }

    pub fn config(&self) -> &InputProcessConfig {
        &self.config
    }

    pub fn state(&self) -> &InputProcessState {
        &self.state
    }

    pub fn is_idle(&self) -> bool {
        !self.state.busy && self.state.mode == Mode::Idle
    }

    pub fn bank(&self, bank: Bank) -> &WeightBank {
        &self.banks[bank.index()]
    }

    pub fn set_requant_shift(&mut self, bank: Bank, shift: u32) {
        self.requant_shift[bank.index()] = shift;
    }

    pub fn requant_shift(&self, bank: Bank) -> u32 {
        self.requant_shift[bank.index()]
    }

    /// Highest per-cell write count over all banks.
    pub fn max_cell_writes(&self) -> u32 {
        self.banks
            .iter()
            .flat_map(|b| b.macros.iter())
            .map(ApimMacro::max_write_count)
            .max()
            .unwrap_or(0)
    }

    fn reset(&mut self) {
        self.state.mode = Mode::Idle;
        self.state.busy = false;
        self.state.cycle_counter = 0;
        self.latched.clear();
        for a in &mut self.acc {
            a.iter_mut().for_each(|v| *v = 0);
        }
    }

    fn op_cycles(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Write | Mode::Read => self.config.column_cycles(),
            Mode::Cim => self.config.cim_cycles(),
            Mode::Idle => 0,
        }
    }

    /// Advances one clock.
    ///
    /// `cs` low freezes the module. `rst` wins over everything else. An
    /// operation is accepted only from IDLE; while it runs, mode inputs are
    /// ignored. `done` is high on the operation's last cycle only, after
    /// which the module is back in IDLE. An unassigned `weight_sel` makes
    /// the command a no-op.
    pub fn step(&mut self, ctl: &InputProcessControl<'_>) -> Result<InputProcessOutputs> {
        let mut out = InputProcessOutputs::default();
        if ctl.rst {
            self.reset();
            return Ok(out);
        }
        if !ctl.cs {
            return Ok(out);
        }
        if !self.state.busy {
            let mode = Mode::decode(ctl.web, ctl.cimeb);
            if mode == Mode::Idle {
                self.state.mode = Mode::Idle;
                return Ok(out);
            }
            let Some(bank) = Bank::from_weight_sel(ctl.weight_sel) else {
                return Ok(out);
            };
            match mode {
                Mode::Write => {
                    check_index("col_sel", ctl.col_sel, self.config.d_k)?;
                    check_len("WRITE data_in", ctl.data_in.len(), self.config.d_model)?;
                    self.latched.clear();
                    self.latched.extend_from_slice(ctl.data_in);
                }
                Mode::Read => {
                    check_index("col_sel", ctl.col_sel, self.config.d_k)?;
                }
                Mode::Cim => {
                    check_len("CIM data_in", ctl.data_in.len(), self.config.d_model)?;
                    self.latched.clear();
                    self.latched.extend_from_slice(ctl.data_in);
                    for a in &mut self.acc {
                        a.iter_mut().for_each(|v| *v = 0);
                    }
                }
                Mode::Idle => unreachable!(),
            }
            self.state.mode = mode;
            self.state.busy = true;
            self.state.cycle_counter = 0;
            self.state.selected_bank = bank;
            self.col_sel = ctl.col_sel;
            out.started = Some(mode);
        }
        self.work_cycle(&mut out)?;
        Ok(out)
    }

    fn work_cycle(&mut self, out: &mut InputProcessOutputs) -> Result<()> {
        let i = self.state.cycle_counter as usize;
        let rows = self.config.geometry.rows;
        let col = self.col_sel;
        let bank = self.state.selected_bank.index();
        match self.state.mode {
            Mode::Write => {
                // one row per macro, all macros in parallel
                for (m, mac) in self.banks[bank].macros.iter_mut().enumerate() {
                    mac.write_cell(i, col, self.latched[m * rows + i])?;
                }
            }
            Mode::Read => {
                for (m, mac) in self.banks[bank].macros.iter().enumerate() {
                    self.read_buffer[m * rows + i] = mac.read_cell(i, col)?;
                }
            }
            Mode::Cim => {
                let (rs, cg) = self.config.geometry.step_coords(i);
                for (m, mac) in self.banks[bank].macros.iter().enumerate() {
                    let x = &self.latched[m * rows..(m + 1) * rows];
                    mac.accumulate_step(x, rs, cg, &mut self.acc[m], &mut self.scratch)?;
                }
            }
            Mode::Idle => return Ok(()),
        }
        self.state.cycle_counter += 1;
        if self.state.cycle_counter == self.op_cycles(self.state.mode) {
            match self.state.mode {
                Mode::Read => out.mem_data_out = Some(self.read_buffer.clone()),
                Mode::Cim => out.data_out = Some(self.finish_projection()),
                _ => {}
            }
            out.done = true;
            self.state.mode = Mode::Idle;
            self.state.busy = false;
            self.state.cycle_counter = 0;
        }
        Ok(())
    }

    /// Stack sum across macros, then requantize to int8.
    fn finish_projection(&self) -> Vec<i8> {
        let shift = self.requant_shift[self.state.selected_bank.index()];
        (0..self.config.d_k)
            .map(|c| {
                let sum = self
                    .acc
                    .iter()
                    .fold(0i64, |s, a| saturating_accumulate(s, a[c], STACK_SUM_BITS));
                shift_round_saturate(sum, shift, 8) as i8
            })
            .collect()
    }

    fn require_idle(&self) -> Result<()> {
        if self.is_idle() {
            Ok(())
        } else {
            Err(SimError::Busy("input process"))
        }
    }

    fn drive(&mut self, first: InputProcessControl<'_>) -> Result<(InputProcessOutputs, u64)> {
        let mut out = self.step(&first)?;
        let mut cycles = 1;
        let idle = InputProcessControl::idle();
        while !out.done {
            out = self.step(&idle)?;
            cycles += 1;
        }
        Ok((out, cycles))
    }

    /// Writes column `col_sel` of `bank` (`d_model` words); returns cycles.
    pub fn write_column(&mut self, bank: Bank, col_sel: usize, column: &[i8]) -> Result<u64> {
        self.require_idle()?;
        check_index("col_sel", col_sel, self.config.d_k)?;
        check_len("column", column.len(), self.config.d_model)?;
        let (_, cycles) = self.drive(InputProcessControl::command(
            Mode::Write,
            bank,
            col_sel,
            column,
        ))?;
        Ok(cycles)
    }

    pub fn read_column(&mut self, bank: Bank, col_sel: usize) -> Result<(Vec<i8>, u64)> {
        self.require_idle()?;
        check_index("col_sel", col_sel, self.config.d_k)?;
        let (out, cycles) =
            self.drive(InputProcessControl::command(Mode::Read, bank, col_sel, &[]))?;
        Ok((out.mem_data_out.expect("READ completes with data"), cycles))
    }

    /// `x^T W_bank`, requantized to int8; returns the `d_k` row and cycles.
    pub fn compute_projection(&mut self, bank: Bank, x: &[i8]) -> Result<(Vec<i8>, u64)> {
        self.require_idle()?;
        check_len("token", x.len(), self.config.d_model)?;
        let (out, cycles) = self.drive(InputProcessControl::command(Mode::Cim, bank, 0, x))?;
        Ok((out.data_out.expect("CIM completes with data"), cycles))
    }
}
