//! Three-channel data mover.
//!
//! A transfer serializes its payload into little-endian bus beats of
//! `bus_width` bits, moves one beat per cycle and reassembles the parallel
//! word at the destination on the final cycle. Nothing is visible at the
//! destination before then.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelId {
    /// External memory to the input process (weights and tokens).
    MemToIp,
    /// Input process to score (K rows and q vectors).
    IpToScore,
    /// Score to softmax (score rows).
    ScoreToSoftmax,
}

impl ChannelId {
    pub const ALL: [ChannelId; 3] = [
        ChannelId::MemToIp,
        ChannelId::IpToScore,
        ChannelId::ScoreToSoftmax,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::MemToIp => "mem_to_ip",
            ChannelId::IpToScore => "ip_to_score",
            ChannelId::ScoreToSoftmax => "score_to_softmax",
        }
    }

    pub fn source(self) -> Endpoint {
        match self {
            ChannelId::MemToIp => Endpoint::ExternalMemory,
            ChannelId::IpToScore => Endpoint::InputProcess,
            ChannelId::ScoreToSoftmax => Endpoint::Score,
        }
    }

    pub fn destination(self) -> Endpoint {
        match self {
            ChannelId::MemToIp => Endpoint::InputProcess,
            ChannelId::IpToScore => Endpoint::Score,
            ChannelId::ScoreToSoftmax => Endpoint::Softmax,
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    ExternalMemory,
    InputProcess,
    Score,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Idle,
    Transferring,
}

/// Bus cycles needed to move `payload_bits`.
pub fn transfer_cycles(payload_bits: u64, bus_width: u32) -> u64 {
    payload_bits.div_ceil(bus_width as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub channel: ChannelId,
    pub payload_bits: u64,
    pub source: Endpoint,
    pub destination: Endpoint,
    pub cycles: u64,
}

/// Packs bytes into `bus_width`-bit little-endian beats.
pub fn pack_beats(payload: &[u8], bus_width: u32) -> Vec<u64> {
    let bytes_per_beat = (bus_width / 8) as usize;
    payload
        .chunks(bytes_per_beat)
        .map(|chunk| {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            u64::from_le_bytes(word)
        })
        .collect()
}

/// Inverse of [`pack_beats`], truncated to `len` bytes.
pub fn unpack_beats(beats: &[u64], bus_width: u32, len: usize) -> Vec<u8> {
    let bytes_per_beat = (bus_width / 8) as usize;
    let mut out = Vec::with_capacity(beats.len() * bytes_per_beat);
    for beat in beats {
        out.extend_from_slice(&beat.to_le_bytes()[..bytes_per_beat]);
    }
    out.truncate(len);
    out
}

#[derive(Debug, Clone)]
struct InFlight {
    transfer: Transfer,
    beats: Vec<u64>,
    received: Vec<u64>,
    len: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DmaStep {
    pub done: bool,
    /// The reassembled payload, present only on the completion cycle.
    pub delivered: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct DmaChannel {
    id: ChannelId,
    bus_width: u32,
    in_flight: Option<InFlight>,
    started: u64,
    completed: u64,
}

impl DmaChannel {
    pub fn new(id: ChannelId, bus_width: u32) -> Result<Self> {
        if !(8..=64).contains(&bus_width) || !bus_width.is_multiple_of(8) {
            return Err(SimError::InvalidArgument(format!(
                "bus width {bus_width} must be a multiple of 8 in 8..=64"
            )));
        }
        Ok(Self {
            id,
            bus_width,
            in_flight: None,
            started: 0,
            completed: 0,
        })
    }

    pub fn id(&self) -> ChannelId {
        self.id
    }

    pub fn bus_width(&self) -> u32 {
        self.bus_width
    }

    pub fn state(&self) -> ChannelState {
        if self.in_flight.is_some() {
            ChannelState::Transferring
        } else {
            ChannelState::Idle
        }
    }

    pub fn current(&self) -> Option<&Transfer> {
        self.in_flight.as_ref().map(|f| &f.transfer)
    }

    pub fn transfers_started(&self) -> u64 {
        self.started
    }

    pub fn transfers_completed(&self) -> u64 {
        self.completed
    }

    pub fn start_transfer(&mut self, payload: &[u8]) -> Result<Transfer> {
        if self.in_flight.is_some() {
            return Err(SimError::Busy("DMA channel"));
        }
        let payload_bits = payload.len() as u64 * 8;
        let transfer = Transfer {
            channel: self.id,
            payload_bits,
            source: self.id.source(),
            destination: self.id.destination(),
            cycles: transfer_cycles(payload_bits, self.bus_width),
        };
        self.in_flight = Some(InFlight {
            transfer,
            beats: pack_beats(payload, self.bus_width),
            received: Vec::with_capacity(transfer.cycles as usize),
            len: payload.len(),
        });
        self.started += 1;
        Ok(transfer)
    }

    /// Moves one beat. An empty transfer completes on its first step
    /// without consuming a bus cycle.
    pub fn step(&mut self) -> DmaStep {
        let Some(flight) = self.in_flight.as_mut() else {
            return DmaStep::default();
        };
        if flight.received.len() < flight.beats.len() {
            let beat = flight.beats[flight.received.len()];
            flight.received.push(beat);
        }
        if flight.received.len() < flight.beats.len() {
            return DmaStep::default();
        }
        let flight = self.in_flight.take().expect("checked above");
        self.completed += 1;
        DmaStep {
            done: true,
            delivered: Some(unpack_beats(&flight.received, self.bus_width, flight.len)),
        }
    }
}

/// The three channels.
#[derive(Debug, Clone)]
pub struct Dma {
    channels: Vec<DmaChannel>,
}

impl Dma {
    pub fn new(bus_width: u32) -> Result<Self> {
        let channels = ChannelId::ALL
            .iter()
            .map(|&id| DmaChannel::new(id, bus_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { channels })
    }

    pub fn channel(&self, id: ChannelId) -> &DmaChannel {
        &self.channels[id.index()]
    }

    pub fn channel_mut(&mut self, id: ChannelId) -> &mut DmaChannel {
        &mut self.channels[id.index()]
    }

    pub fn is_idle(&self) -> bool {
        self.channels
            .iter()
            .all(|c| c.state() == ChannelState::Idle)
    }
}
