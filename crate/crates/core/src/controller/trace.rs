use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleId {
    Dma,
    InputProcess,
    Score,
    Softmax,
    Ctrl,
}

impl ModuleId {
    pub const ALL: [ModuleId; 5] = [
        ModuleId::Dma,
        ModuleId::InputProcess,
        ModuleId::Score,
        ModuleId::Softmax,
        ModuleId::Ctrl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleId::Dma => "dma",
            ModuleId::InputProcess => "input_process",
            ModuleId::Score => "score",
            ModuleId::Softmax => "softmax",
            ModuleId::Ctrl => "ctrl",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleId {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        ModuleId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SimError::InvalidArgument(format!("unknown module `{s}`")))
    }
}

/// Small set of modules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ModuleSet(u8);

impl ModuleSet {
    pub fn insert(&mut self, m: ModuleId) {
        self.0 |= m.bit();
    }

    pub fn contains(self, m: ModuleId) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ModuleId> {
        ModuleId::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl FromIterator<ModuleId> for ModuleSet {
    fn from_iter<I: IntoIterator<Item = ModuleId>>(iter: I) -> Self {
        let mut s = ModuleSet::default();
        for m in iter {
            s.insert(m);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub module: ModuleId,
    pub event: String,
    /// Truncated SHA-256 of the data the event carries; 0 when it carries none.
    pub digest: u64,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:016x}",
            self.cycle, self.module, self.event, self.digest
        )
    }
}

/// First 8 bytes of SHA-256, big-endian.
pub fn payload_digest(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_be_bytes(hash[..8].try_into().expect("32-byte hash"))
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 40);
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

/// Digest of the whole formatted stream.
pub fn trace_digest(records: &[TraceRecord]) -> u64 {
    payload_digest(format_trace(records).as_bytes())
}

fn parse_line(n: usize, line: &str) -> Result<TraceRecord> {
    let bad = |why: &str| SimError::InvalidArgument(format!("trace line {n}: {why}"));
    let fields: Vec<&str> = line.split('\t').collect();
    let [cycle, module, event, digest] = fields[..] else {
        return Err(bad("expected 4 tab-separated fields"));
    };
    if event.is_empty() || event.contains(char::is_whitespace) {
        return Err(bad("bad event"));
    }
    if digest.len() != 16 {
        return Err(bad("digest must be 16 hex digits"));
    }
    Ok(TraceRecord {
        cycle: cycle.parse().map_err(|_| bad("bad cycle"))?,
        module: module.parse().map_err(|_| bad("unknown module"))?,
        event: event.to_string(),
        digest: u64::from_str_radix(digest, 16).map_err(|_| bad("bad digest"))?,
    })
}

/// Parses a trace stream; blank lines are skipped and cycles must not
/// decrease.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(i + 1, line)?;
        if out.last().is_some_and(|prev| prev.cycle > rec.cycle) {
            return Err(SimError::InvalidArgument(format!(
                "trace line {}: cycle goes backwards",
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let recs = vec![
            TraceRecord {
                cycle: 0,
                module: ModuleId::Ctrl,
                event: "enter:S0_0".into(),
                digest: 0,
            },
            TraceRecord {
                cycle: 512,
                module: ModuleId::Dma,
                event: "done:mem_to_ip".into(),
                digest: payload_digest(b"abc"),
            },
        ];
        let text = format_trace(&recs);
        assert_eq!(
            text.lines().next().unwrap(),
            "0\tctrl\tenter:S0_0\t0000000000000000"
        );
        assert_eq!(parse_trace(&text).unwrap(), recs);
    }

    #[test]
    fn sha256_prefix() {
        assert_eq!(payload_digest(b"abc"), 0xba7816bf8f01cfea);
    }

    #[test]
    fn malformed() {
        assert!(parse_trace("1\tctrl\thalt").is_err());
        assert!(parse_trace("x\tctrl\thalt\t0000000000000000").is_err());
        assert!(parse_trace("1\tgpu\thalt\t0000000000000000").is_err());
        assert!(parse_trace("1\tctrl\thalt\t00").is_err());
        assert!(parse_trace("5\tctrl\ta\t0000000000000000\n4\tctrl\tb\t0000000000000000").is_err());
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn module_set() {
        let s: ModuleSet = [ModuleId::Score, ModuleId::Dma].into_iter().collect();
        assert!(s.contains(ModuleId::Score) && !s.contains(ModuleId::Softmax));
        assert_eq!(
            s.iter().collect::<Vec<_>>(),
            vec![ModuleId::Dma, ModuleId::Score]
        );
        assert!(ModuleSet::default().is_empty());
    }
}
