//! Simulation kernel and the two-level top controller.
//!
//! Every tick steps the DMA, input process, score and softmax modules (in
//! that order, skipping stalled ones) and then the controller. A module's
//! done is registered and seen by the controller one tick later; the
//! controller's enables are sampled by the module on the following tick.

mod stats;
mod trace;

use std::collections::VecDeque;
use std::fmt;

pub use stats::{
    stats, ModuleStats, OpStats, StateStats, Stats, TimingChecks, HALT_STATE, NOMINAL_CIM_CYCLES,
    NOMINAL_COLUMN_WRITE_CYCLES, VALUE_STATE,
};
pub use trace::{
    format_trace, parse_trace, payload_digest, trace_digest, ModuleId, ModuleSet, TraceRecord,
};

use crate::config::{resolve_shifts, AttentionConfig, ResolvedShifts};
use crate::dma::{ChannelId, ChannelState, Dma, Endpoint};
use crate::error::{Result, SimError};
use crate::input_process::{Bank, InputProcess, InputProcessConfig, InputProcessControl, Mode};
use crate::numerics::shift_round_saturate;
use crate::score::{Score, ScoreConfig, ScoreControl};
use crate::softmax::{Softmax, SoftmaxControl};
use crate::workload::{Int8Matrix, Weights, Workload};

/// Ticks without any trace event before the run is declared deadlocked.
pub const WATCHDOG_CYCLES: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    pub cycle: u64,
    pub stall_mask: ModuleSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerState {
    LoadWeights,
    LoadInput,
    ComputeK,
    LoadKAndFirstQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterState {
    S0Ready(InnerState),
    MoveQ,
    Compute,
    MoveScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerState {
    Idle,
    /// Started; enters S0_0 on the next controller step.
    Armed,
    Running {
        outer: OuterState,
        token: usize,
    },
    Value,
    Halted,
}

impl ControllerState {
    pub fn name(self) -> &'static str {
        match self {
            ControllerState::Idle => "idle",
            ControllerState::Armed => "armed",
            ControllerState::Running { outer, .. } => match outer {
                OuterState::S0Ready(InnerState::LoadWeights) => "S0_0",
                OuterState::S0Ready(InnerState::LoadInput) => "S0_1",
                OuterState::S0Ready(InnerState::ComputeK) => "S0_2",
                OuterState::S0Ready(InnerState::LoadKAndFirstQ) => "S0_3",
                OuterState::MoveQ => "S1",
                OuterState::Compute => "S2",
                OuterState::MoveScore => "S3",
            },
            ControllerState::Value => VALUE_STATE,
            ControllerState::Halted => HALT_STATE,
        }
    }

    fn is_dma_state(self) -> bool {
        matches!(
            self,
            ControllerState::Running {
                outer: OuterState::MoveQ | OuterState::MoveScore,
                ..
            }
        )
    }
}

impl fmt::Display for ControllerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One enable/done handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    MoveWeightColumn { bank: Bank, col: usize },
    MoveToken(usize),
    MoveK(usize),
    MoveQ(usize),
    MoveScore(usize),
    WriteColumn { bank: Bank, col: usize },
    Project { bank: Bank, token: usize },
    LoadK(usize),
    Query(usize),
    Normalize(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Dma(ChannelId),
    Ip,
    Score,
    Softmax,
}

const UNITS: usize = 6;

impl Unit {
    fn index(self) -> usize {
        match self {
            Unit::Dma(ch) => ch.index(),
            Unit::Ip => 3,
            Unit::Score => 4,
            Unit::Softmax => 5,
        }
    }

    fn module(self) -> ModuleId {
        match self {
            Unit::Dma(_) => ModuleId::Dma,
            Unit::Ip => ModuleId::InputProcess,
            Unit::Score => ModuleId::Score,
            Unit::Softmax => ModuleId::Softmax,
        }
    }
}

impl Op {
    fn unit(self) -> Unit {
        match self {
            Op::MoveWeightColumn { .. } | Op::MoveToken(_) => Unit::Dma(ChannelId::MemToIp),
            Op::MoveK(_) | Op::MoveQ(_) => Unit::Dma(ChannelId::IpToScore),
            Op::MoveScore(_) => Unit::Dma(ChannelId::ScoreToSoftmax),
            Op::WriteColumn { .. } | Op::Project { .. } => Unit::Ip,
            Op::LoadK(_) | Op::Query(_) => Unit::Score,
            Op::Normalize(_) => Unit::Softmax,
        }
    }

    fn label(self) -> String {
        match self {
            Op::WriteColumn { bank, .. } => format!("write.{}", bank.name()),
            Op::Project { bank, .. } => format!("cim.{}", bank.name()),
            Op::LoadK(_) => "k_mode".into(),
            Op::Query(_) => "q_mode".into(),
            Op::Normalize(_) => "softmax".into(),
            _ => match self.unit() {
                Unit::Dma(ch) => ch.name().into(),
                _ => unreachable!(),
            },
        }
    }
}

fn endpoint_module(e: Endpoint) -> Option<ModuleId> {
    match e {
        Endpoint::ExternalMemory => None,
        Endpoint::InputProcess => Some(ModuleId::InputProcess),
        Endpoint::Score => Some(ModuleId::Score),
        Endpoint::Softmax => Some(ModuleId::Softmax),
    }
}

fn to_bytes(v: &[i8]) -> Vec<u8> {
    v.iter().map(|&x| x as u8).collect()
}

fn from_bytes(v: &[u8]) -> Vec<i8> {
    v.iter().map(|&x| x as i8).collect()
}

struct IpCommand {
    mode: Mode,
    bank: Bank,
    col: usize,
    data: Vec<i8>,
}

struct ScoreCommand {
    load_k: bool,
    address: usize,
    data: Vec<i8>,
}

/// On-chip buffers at module boundaries.
#[derive(Debug, Clone, Default)]
struct Buffers {
    weight_column: Vec<i8>,
    tokens: Vec<Option<Vec<i8>>>,
    projections: [Vec<Option<Vec<i8>>>; 3],
    score_k_in: Vec<i8>,
    score_q_in: Vec<i8>,
    scores: Vec<Option<Vec<i8>>>,
    softmax_in: Vec<i8>,
    probs: Vec<Option<Vec<u8>>>,
}

impl Buffers {
    fn new(seq_len: usize) -> Self {
        Self {
            tokens: vec![None; seq_len],
            projections: std::array::from_fn(|_| vec![None; seq_len]),
            scores: vec![None; seq_len],
            probs: vec![None; seq_len],
            ..Self::default()
        }
    }
}

fn missing(what: &str, t: usize) -> SimError {
    SimError::Precondition(format!("{what} for token {t} not available"))
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub outputs: Int8Matrix,
    pub probs: Vec<Vec<u8>>,
    pub scores: Vec<Vec<i8>>,
    pub q: Int8Matrix,
    pub k: Int8Matrix,
    pub v: Int8Matrix,
    pub shifts: ResolvedShifts,
    pub trace: Vec<TraceRecord>,
    pub stats: Stats,
}

/// The accelerator plus its external memory.
pub struct System {
    config: AttentionConfig,
    clock: SimClock,
    dma: Dma,
    ip: InputProcess,
    score: Score,
    softmax: Softmax,
    weights: Option<Weights>,
    tokens: Option<Int8Matrix>,
    shifts: Option<ResolvedShifts>,
    buffers: Buffers,
    ctrl: ControllerState,
    lanes: Vec<VecDeque<Op>>,
    lane_issued: Vec<bool>,
    inflight: [Option<(Op, usize)>; UNITS],
    ip_cmd: Option<IpCommand>,
    score_cmd: Option<ScoreCommand>,
    softmax_cmd: Option<Vec<i8>>,
    dma_cmd: [Option<Vec<u8>>; 3],
    dones_prev: Vec<Unit>,
    dones_now: Vec<Unit>,
    value_until: u64,
    trace: Vec<TraceRecord>,
    last_event_cycle: u64,
}

impl System {
    pub fn new(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let softmax = Softmax::from_attention(&config)?;
        Ok(Self {
            clock: SimClock::default(),
            dma: Dma::new(config.bus_width)?,
            ip: InputProcess::new(InputProcessConfig::from_attention(&config))?,
            score: Score::new(ScoreConfig::from_attention(&config))?,
            softmax,
            weights: None,
            tokens: None,
            shifts: None,
            buffers: Buffers::new(config.seq_len),
            ctrl: ControllerState::Idle,
            lanes: Vec::new(),
            lane_issued: Vec::new(),
            inflight: [None; UNITS],
            ip_cmd: None,
            score_cmd: None,
            softmax_cmd: None,
            dma_cmd: [None, None, None],
            dones_prev: Vec::new(),
            dones_now: Vec::new(),
            value_until: 0,
            trace: Vec::new(),
            last_event_cycle: 0,
            config,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn controller_state(&self) -> ControllerState {
        self.ctrl
    }

    pub fn input_process(&self) -> &InputProcess {
        &self.ip
    }

    pub fn score(&self) -> &Score {
        &self.score
    }

    pub fn softmax(&self) -> &Softmax {
        &self.softmax
    }

    pub fn dma(&self) -> &Dma {
        &self.dma
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn is_halted(&self) -> bool {
        self.ctrl == ControllerState::Halted
    }

    pub fn load_weights(&mut self, weights: Weights) {
        self.weights = Some(weights);
    }

    pub fn load_tokens(&mut self, tokens: Int8Matrix) {
        self.tokens = Some(tokens);
    }

    /// Checks the loaded memory, resolves requantization shifts and arms
    /// the controller.
    pub fn start(&mut self) -> Result<()> {
        if self.ctrl != ControllerState::Idle {
            return Err(SimError::Busy("controller"));
        }
        let weights = self
            .weights
            .clone()
            .ok_or_else(|| SimError::Precondition("weights not loaded".into()))?;
        let tokens = self
            .tokens
            .clone()
            .ok_or_else(|| SimError::Precondition("tokens not loaded".into()))?;
        let workload = Workload { weights, tokens };
        workload.validate(&self.config)?;
        let shifts = resolve_shifts(&self.config, &workload)?;
        for bank in Bank::ALL {
            self.ip.set_requant_shift(bank, shifts.projection(bank));
        }
        self.score.set_requant_shift(shifts.score);
        self.shifts = Some(shifts);
        self.ctrl = ControllerState::Armed;
        self.last_event_cycle = self.clock.cycle;
        Ok(())
    }

    fn compute_stall_mask(&self) -> ModuleSet {
        let mut mask = ModuleSet::default();
        if self.ctrl.is_dma_state() {
            mask.insert(ModuleId::InputProcess);
            mask.insert(ModuleId::Score);
            mask.insert(ModuleId::Softmax);
        }
        for ch in ChannelId::ALL {
            let active = self.dma_cmd[ch.index()].is_some()
                || self.dma.channel(ch).state() == ChannelState::Transferring;
            if active {
                if let Some(m) = endpoint_module(ch.destination()) {
                    mask.insert(m);
                }
            }
        }
        mask
    }

    fn emit(&mut self, module: ModuleId, event: String, digest: u64) {
        self.trace.push(TraceRecord {
            cycle: self.clock.cycle,
            module,
            event,
            digest,
        });
    }

    fn inflight_op(&self, unit: Unit) -> Result<Op> {
        self.inflight[unit.index()]
            .map(|(op, _)| op)
            .ok_or_else(|| {
                SimError::Precondition(format!("{} finished without an enable", unit.module()))
            })
    }

    fn step_dma(&mut self) -> Result<()> {
        for ch in ChannelId::ALL {
            let unit = Unit::Dma(ch);
            if let Some(payload) = self.dma_cmd[ch.index()].take() {
                self.dma.channel_mut(ch).start_transfer(&payload)?;
                self.emit(ModuleId::Dma, format!("start:{ch}"), 0);
            }
            let step = self.dma.channel_mut(ch).step();
            if !step.done {
                continue;
            }
            let data = step.delivered.unwrap_or_default();
            let digest = payload_digest(&data);
            let row = from_bytes(&data);
            match self.inflight_op(unit)? {
                Op::MoveWeightColumn { .. } => self.buffers.weight_column = row,
                Op::MoveToken(t) => self.buffers.tokens[t] = Some(row),
                Op::MoveK(_) => self.buffers.score_k_in = row,
                Op::MoveQ(_) => self.buffers.score_q_in = row,
                Op::MoveScore(_) => self.buffers.softmax_in = row,
                op => unreachable!("{op:?} on a DMA channel"),
            }
            self.emit(ModuleId::Dma, format!("done:{ch}"), digest);
            self.dones_now.push(unit);
        }
        Ok(())
    }

    fn step_ip(&mut self) -> Result<()> {
        let cmd = self.ip_cmd.take();
        let ctl = match &cmd {
            Some(c) => InputProcessControl::command(c.mode, c.bank, c.col, &c.data),
            None => InputProcessControl::idle(),
        };
        let out = self.ip.step(&ctl)?;
        if cmd.is_some() && out.started.is_none() {
            return Err(SimError::Precondition(
                "input process ignored an enable".into(),
            ));
        }
        if out.started.is_some() {
            let op = self.inflight_op(Unit::Ip)?;
            self.emit(ModuleId::InputProcess, format!("start:{}", op.label()), 0);
        }
        if out.done {
            let op = self.inflight_op(Unit::Ip)?;
            let digest = match (op, out.data_out) {
                (Op::Project { bank, token }, Some(row)) => {
                    let d = payload_digest(&to_bytes(&row));
                    self.buffers.projections[bank.index()][token] = Some(row);
                    d
                }
                _ => 0,
            };
            self.emit(
                ModuleId::InputProcess,
                format!("done:{}", op.label()),
                digest,
            );
            self.dones_now.push(Unit::Ip);
        }
        Ok(())
    }

    fn step_score(&mut self) -> Result<()> {
        let cmd = self.score_cmd.take();
        let ctl = match &cmd {
            Some(c) if c.load_k => ScoreControl::load_k(c.address, &c.data),
            Some(c) => ScoreControl::query(&c.data),
            None => ScoreControl::idle(),
        };
        let out = self.score.step(&ctl)?;
        if cmd.is_some() && out.started.is_none() {
            return Err(SimError::Precondition("score ignored an enable".into()));
        }
        if out.started.is_some() {
            let op = self.inflight_op(Unit::Score)?;
            self.emit(ModuleId::Score, format!("start:{}", op.label()), 0);
        }
        if out.input_done || out.output_done {
            let op = self.inflight_op(Unit::Score)?;
            let digest = match (op, out.qk_output) {
                (Op::Query(t), Some(row)) => {
                    let d = payload_digest(&to_bytes(&row));
                    self.buffers.scores[t] = Some(row);
                    d
                }
                _ => 0,
            };
            self.emit(ModuleId::Score, format!("done:{}", op.label()), digest);
            self.dones_now.push(Unit::Score);
        }
        Ok(())
    }

    fn step_softmax(&mut self) -> Result<()> {
        let cmd = self.softmax_cmd.take();
        let ctl = match &cmd {
            Some(data) => SoftmaxControl::start(data),
            None => SoftmaxControl::idle(),
        };
        let out = self.softmax.step(&ctl)?;
        if cmd.is_some() && !out.started {
            return Err(SimError::Precondition("softmax ignored an enable".into()));
        }
        if out.started {
            self.emit(ModuleId::Softmax, "start:softmax".into(), 0);
        }
        if out.done {
            let Op::Normalize(t) = self.inflight_op(Unit::Softmax)? else {
                unreachable!("softmax runs only normalize ops");
            };
            let probs = out.data_out.unwrap_or_default();
            let digest = payload_digest(&probs);
            self.buffers.probs[t] = Some(probs);
            self.emit(ModuleId::Softmax, "done:softmax".into(), digest);
            self.dones_now.push(Unit::Softmax);
        }
        Ok(())
    }

    fn next_state(&self) -> ControllerState {
        use InnerState::*;
        use OuterState::*;
        let n = self.config.seq_len;
        let running = |outer, token| ControllerState::Running { outer, token };
        match self.ctrl {
            ControllerState::Armed => running(S0Ready(LoadWeights), 0),
            ControllerState::Running { outer, token } => match outer {
                S0Ready(LoadWeights) => running(S0Ready(LoadInput), 0),
                S0Ready(LoadInput) => running(S0Ready(ComputeK), 0),
                S0Ready(ComputeK) => running(S0Ready(LoadKAndFirstQ), 0),
                S0Ready(LoadKAndFirstQ) => running(MoveQ, 0),
                MoveQ => running(Compute, token),
                Compute => running(MoveScore, token),
                // the last token's softmax runs in one extra S2/S3 pair
                MoveScore if token + 1 < n => running(MoveQ, token + 1),
                MoveScore if token + 1 == n => running(Compute, n),
                MoveScore if self.config.value_latency > 0 => ControllerState::Value,
                MoveScore => ControllerState::Halted,
            },
            ControllerState::Value => ControllerState::Halted,
            s => s,
        }
    }

    fn schedule(&self, state: ControllerState) -> Vec<VecDeque<Op>> {
        use InnerState::*;
        use OuterState::*;
        let n = self.config.seq_len;
        let ControllerState::Running { outer, token: t } = state else {
            return Vec::new();
        };
        let mut lanes: Vec<Vec<Op>> = match outer {
            S0Ready(LoadWeights) => vec![Bank::ALL
                .iter()
                .flat_map(|&bank| {
                    (0..self.config.d_k).flat_map(move |col| {
                        [
                            Op::MoveWeightColumn { bank, col },
                            Op::WriteColumn { bank, col },
                        ]
                    })
                })
                .collect()],
            S0Ready(LoadInput) => vec![(0..n).map(Op::MoveToken).collect()],
            S0Ready(ComputeK) => vec![(0..n)
                .map(|token| Op::Project {
                    bank: Bank::K,
                    token,
                })
                .collect()],
            S0Ready(LoadKAndFirstQ) => vec![
                (0..n).flat_map(|t| [Op::MoveK(t), Op::LoadK(t)]).collect(),
                vec![
                    Op::Project {
                        bank: Bank::Q,
                        token: 0,
                    },
                    Op::Project {
                        bank: Bank::V,
                        token: 0,
                    },
                ],
            ],
            MoveQ => vec![vec![Op::MoveQ(t)]],
            Compute => {
                let mut l = Vec::new();
                if t < n {
                    l.push(vec![Op::Query(t)]);
                }
                if t > 0 {
                    l.push(vec![Op::Normalize(t - 1)]);
                }
                if t + 1 < n {
                    l.push(vec![
                        Op::Project {
                            bank: Bank::Q,
                            token: t + 1,
                        },
                        Op::Project {
                            bank: Bank::V,
                            token: t + 1,
                        },
                    ]);
                }
                l
            }
            MoveScore if t < n => vec![vec![Op::MoveScore(t)]],
            MoveScore => Vec::new(),
        };
        if !self.config.pipeline && lanes.len() > 1 {
            lanes = vec![lanes.concat()];
        }
        lanes.into_iter().map(VecDeque::from).collect()
    }

    fn advance(&mut self) {
        self.ctrl = self.next_state();
        match self.ctrl {
            ControllerState::Halted => self.emit(ModuleId::Ctrl, "halt".into(), 0),
            ControllerState::Value => {
                self.value_until =
                    self.clock.cycle + self.config.value_latency * self.config.seq_len as u64;
                self.emit(ModuleId::Ctrl, format!("enter:{VALUE_STATE}"), 0);
            }
            s => self.emit(ModuleId::Ctrl, format!("enter:{s}"), 0),
        }
        self.lanes = self.schedule(self.ctrl);
        self.lane_issued = vec![false; self.lanes.len()];
    }

    fn issue(&mut self, op: Op, lane: usize) -> Result<()> {
        let unit = op.unit();
        match op {
            Op::MoveWeightColumn { bank, col } => {
                let w = self.weights.as_ref().expect("checked at start");
                self.dma_cmd[ChannelId::MemToIp.index()] =
                    Some(to_bytes(&w.bank(bank).column(col)?));
            }
            Op::MoveToken(t) => {
                let x = self.tokens.as_ref().expect("checked at start");
                self.dma_cmd[ChannelId::MemToIp.index()] = Some(to_bytes(x.row(t)));
            }
            Op::MoveK(t) | Op::MoveQ(t) => {
                let bank = if matches!(op, Op::MoveK(_)) {
                    Bank::K
                } else {
                    Bank::Q
                };
                let row = self.buffers.projections[bank.index()][t]
                    .as_ref()
                    .ok_or_else(|| missing(bank.name(), t))?;
                self.dma_cmd[ChannelId::IpToScore.index()] = Some(to_bytes(row));
            }
            Op::MoveScore(t) => {
                let row = self.buffers.scores[t]
                    .as_ref()
                    .ok_or_else(|| missing("score row", t))?;
                self.dma_cmd[ChannelId::ScoreToSoftmax.index()] = Some(to_bytes(row));
            }
            Op::WriteColumn { bank, col } => {
                self.ip_cmd = Some(IpCommand {
                    mode: Mode::Write,
                    bank,
                    col,
                    data: self.buffers.weight_column.clone(),
                });
            }
            Op::Project { bank, token } => {
                let x = self.buffers.tokens[token]
                    .clone()
                    .ok_or_else(|| missing("token", token))?;
                self.ip_cmd = Some(IpCommand {
                    mode: Mode::Cim,
                    bank,
                    col: 0,
                    data: x,
                });
            }
            Op::LoadK(t) => {
                self.score_cmd = Some(ScoreCommand {
                    load_k: true,
                    address: t,
                    data: self.buffers.score_k_in.clone(),
                });
            }
            Op::Query(_) => {
                self.score_cmd = Some(ScoreCommand {
                    load_k: false,
                    address: 0,
                    data: self.buffers.score_q_in.clone(),
                });
            }
            Op::Normalize(_) => self.softmax_cmd = Some(self.buffers.softmax_in.clone()),
        }
        self.inflight[unit.index()] = Some((op, lane));
        self.lane_issued[lane] = true;
        self.emit(
            ModuleId::Ctrl,
            format!("enable:{}/{}", unit.module(), op.label()),
            0,
        );
        Ok(())
    }

    fn step_controller(&mut self) -> Result<()> {
        if matches!(self.ctrl, ControllerState::Idle | ControllerState::Halted) {
            return Ok(());
        }
        for unit in std::mem::take(&mut self.dones_prev) {
            let (_, lane) = self.inflight[unit.index()].take().ok_or_else(|| {
                SimError::Precondition(format!("unexpected done from {}", unit.module()))
            })?;
            self.lanes[lane].pop_front();
            self.lane_issued[lane] = false;
        }
        if self.ctrl == ControllerState::Value {
            if self.clock.cycle >= self.value_until {
                self.advance();
            }
            return Ok(());
        }
        if self.lanes.iter().all(VecDeque::is_empty) {
            self.advance();
        }
        for lane in 0..self.lanes.len() {
            if self.lane_issued[lane] {
                continue;
            }
            let Some(&op) = self.lanes[lane].front() else {
                continue;
            };
            if self.inflight[op.unit().index()].is_none() {
                self.issue(op, lane)?;
            }
        }
        Ok(())
    }

    /// Advances one clock cycle and returns the records it produced.
    pub fn tick(&mut self) -> Result<&[TraceRecord]> {
        let first = self.trace.len();
        self.clock.stall_mask = self.compute_stall_mask();
        let stall = self.clock.stall_mask;
        self.step_dma()?;
        if !stall.contains(ModuleId::InputProcess) {
            self.step_ip()?;
        }
        if !stall.contains(ModuleId::Score) {
            self.step_score()?;
        }
        if !stall.contains(ModuleId::Softmax) {
            self.step_softmax()?;
        }
        self.step_controller()?;
        self.dones_prev = std::mem::take(&mut self.dones_now);
        if self.trace.len() > first {
            self.last_event_cycle = self.clock.cycle;
        } else if !matches!(self.ctrl, ControllerState::Idle | ControllerState::Halted)
            && self.clock.cycle - self.last_event_cycle >= WATCHDOG_CYCLES
        {
            return Err(SimError::Deadlock {
                cycle: self.clock.cycle,
                idle_cycles: self.clock.cycle - self.last_event_cycle,
            });
        }
        self.clock.cycle += 1;
        Ok(&self.trace[first..])
    }

    pub fn run_to_halt(&mut self) -> Result<()> {
        if self.ctrl == ControllerState::Idle {
            self.start()?;
        }
        while !self.is_halted() {
            self.tick()?;
        }
        Ok(())
    }

    fn collect_rows<T: Clone>(rows: &[Option<Vec<T>>], what: &str) -> Result<Vec<Vec<T>>> {
        rows.iter()
            .enumerate()
            .map(|(t, r)| r.clone().ok_or_else(|| missing(what, t)))
            .collect()
    }

    /// Gathers the results of a halted run, applying the value stage.
    pub fn finish(self) -> Result<InferenceResult> {
        if !self.is_halted() {
            return Err(SimError::Precondition("run has not halted".into()));
        }
        let shifts = self.shifts.expect("set at start");
        let proj = |bank: Bank| -> Result<Int8Matrix> {
            let rows = Self::collect_rows(&self.buffers.projections[bank.index()], bank.name())?;
            Int8Matrix::from_rows(&rows, shifts.projection_scales[bank.index()])
        };
        let (q, k, v) = (proj(Bank::Q)?, proj(Bank::K)?, proj(Bank::V)?);
        let scores = Self::collect_rows(&self.buffers.scores, "score row")?;
        let probs = Self::collect_rows(&self.buffers.probs, "probabilities")?;
        let mut out = Vec::with_capacity(probs.len() * v.cols());
        for p in &probs {
            for c in 0..v.cols() {
                let mut acc = 0i64;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj as i64 * v.get(j, c) as i64;
                }
                out.push(shift_round_saturate(acc, shifts.value, 8) as i8);
            }
        }
        let outputs = Int8Matrix::new(probs.len(), v.cols(), out, shifts.output_scale)?;
        let stats = stats(&self.trace);
        Ok(InferenceResult {
            outputs,
            probs,
            scores,
            q,
            k,
            v,
            shifts,
            trace: self.trace,
            stats,
        })
    }
}

/// Runs one full inference on `workload`.
pub fn run_inference(workload: &Workload, config: &AttentionConfig) -> Result<InferenceResult> {
    workload.validate(config)?;
    let mut sys = System::new(config.clone())?;
    sys.load_weights(workload.weights.clone());
    sys.load_tokens(workload.tokens.clone());
    sys.run_to_halt()?;
    sys.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seq_len: usize) -> AttentionConfig {
        AttentionConfig {
            seq_len,
            ..AttentionConfig::desk_small()
        }
    }

    #[test]
    fn idle_tick_advances_clock_only() {
        let mut sys = System::new(AttentionConfig::desk_small()).unwrap();
        assert!(sys.tick().unwrap().is_empty());
        assert!(sys.tick().unwrap().is_empty());
        assert_eq!(sys.clock().cycle, 2);
    }

    #[test]
    fn missing_weights() {
        let mut sys = System::new(AttentionConfig::desk_small()).unwrap();
        sys.load_tokens(Int8Matrix::zeros(32, 128, 1.0).unwrap());
        assert!(matches!(sys.start(), Err(SimError::Precondition(_))));
    }

    #[test]
    fn state_sequence_single_token() {
        let cfg = tiny(1);
        let r = run_inference(&Workload::random(&cfg, 1), &cfg).unwrap();
        let states: Vec<&str> = r
            .trace
            .iter()
            .filter(|t| t.module == ModuleId::Ctrl && !t.event.starts_with("enable:"))
            .map(|t| t.event.as_str())
            .collect();
        assert_eq!(
            states,
            [
                "enter:S0_0",
                "enter:S0_1",
                "enter:S0_2",
                "enter:S0_3",
                "enter:S1",
                "enter:S2",
                "enter:S3",
                "enter:S2",
                "enter:S3",
                "halt"
            ]
        );
        assert_eq!(r.probs, vec![vec![255]]);
    }

    #[test]
    fn first_weight_column_timing() {
        let cfg = tiny(2);
        let mut sys = System::new(cfg).unwrap();
        let w = Workload::random(sys.config(), 2);
        sys.load_weights(w.weights);
        sys.load_tokens(w.tokens);
        sys.start().unwrap();
        let mut events = Vec::new();
        while events.len() < 6 {
            events.extend(
                sys.tick()
                    .unwrap()
                    .iter()
                    .map(|r| (r.cycle, r.event.clone())),
            );
        }
        // 128 bytes over a 64-bit bus: 16 beats
        assert_eq!(
            events[..6],
            [
                (0, "enter:S0_0".into()),
                (0, "enable:dma/mem_to_ip".into()),
                (1, "start:mem_to_ip".into()),
                (16, "done:mem_to_ip".into()),
                (17, "enable:input_process/write.q".into()),
                (18, "start:write.q".into()),
            ]
        );
    }

    #[test]
    fn stalled_modules_do_not_change() {
        let cfg = tiny(3);
        let mut sys = System::new(cfg.clone()).unwrap();
        let w = Workload::random(&cfg, 4);
        sys.load_weights(w.weights);
        sys.load_tokens(w.tokens);
        sys.start().unwrap();
        let mut checked = 0;
        while !sys.is_halted() {
            let before = (*sys.ip.state(), *sys.score.state(), *sys.softmax.state());
            sys.tick().unwrap();
            let mask = sys.clock().stall_mask;
            if mask.contains(ModuleId::InputProcess) {
                assert_eq!(&before.0, sys.ip.state());
            }
            if mask.contains(ModuleId::Score) {
                assert_eq!(&before.1, sys.score.state());
            }
            if mask.contains(ModuleId::Softmax) {
                assert_eq!(&before.2, sys.softmax.state());
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
