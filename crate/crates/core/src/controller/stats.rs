//! Cycle statistics recovered from a trace alone.

use std::collections::BTreeMap;

use serde::Serialize;

use super::trace::{ModuleId, TraceRecord};

/// CIM span and column-write span of the 128 x 128, 16/16 macro.
pub const NOMINAL_CIM_CYCLES: u64 = 64;
pub const NOMINAL_COLUMN_WRITE_CYCLES: u64 = 128;

/// Pseudo-state holding the single halt cycle.
pub const HALT_STATE: &str = "halt";
pub const VALUE_STATE: &str = "VALUE";

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StateStats {
    pub cycles: u64,
    pub visits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModuleStats {
    pub busy_cycles: u64,
    pub utilization: f64,
    pub operations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OpStats {
    pub count: u64,
    pub min_span: u64,
    pub max_span: u64,
    pub total_span: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingChecks {
    pub cim_ops: u64,
    pub cim_ops_at_64: u64,
    pub column_writes: u64,
    pub column_writes_at_128: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stats {
    pub total_cycles: u64,
    pub events: u64,
    pub states: BTreeMap<String, StateStats>,
    pub modules: BTreeMap<String, ModuleStats>,
    pub module_busy_by_state: BTreeMap<String, BTreeMap<String, u64>>,
    pub operations: BTreeMap<String, OpStats>,
    pub timing_checks: TimingChecks,
    /// Functional value stage; its latency is a configured constant, not a
    /// modelled datapath.
    pub value_stage_cycles: u64,
    pub value_stage_outside_cycle_model: bool,
}

impl Stats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

struct Span {
    module: ModuleId,
    label: String,
    start: u64,
    end: u64,
}

impl Span {
    fn len(&self) -> u64 {
        self.end - self.start + 1
    }
}

/// `(start, end_exclusive, name)` per controller state.
fn state_intervals(trace: &[TraceRecord], total: u64) -> Vec<(u64, u64, String)> {
    let mut out: Vec<(u64, u64, String)> = Vec::new();
    for r in trace.iter().filter(|r| r.module == ModuleId::Ctrl) {
        let name = if let Some(s) = r.event.strip_prefix("enter:") {
            s.to_string()
        } else if r.event == "halt" {
            HALT_STATE.to_string()
        } else {
            continue;
        };
        if let Some(last) = out.last_mut() {
            last.1 = r.cycle;
        }
        out.push((r.cycle, total, name));
    }
    if let Some(last) = out.last_mut() {
        if last.2 == HALT_STATE {
            last.1 = last.0 + 1;
        }
    }
    out
}

fn spans(trace: &[TraceRecord]) -> Vec<Span> {
    let mut open: BTreeMap<(ModuleId, &str), u64> = BTreeMap::new();
    let mut out = Vec::new();
    for r in trace.iter().filter(|r| r.module != ModuleId::Ctrl) {
        if let Some(label) = r.event.strip_prefix("start:") {
            open.insert((r.module, label), r.cycle);
        } else if let Some(label) = r.event.strip_prefix("done:") {
            if let Some(start) = open.remove(&(r.module, label)) {
                out.push(Span {
                    module: r.module,
                    label: label.to_string(),
                    start,
                    end: r.cycle,
                });
            }
        }
    }
    out
}

fn union_length(mut intervals: Vec<(u64, u64)>) -> u64 {
    intervals.sort_unstable();
    let mut total = 0;
    let mut current: Option<(u64, u64)> = None;
    for (s, e) in intervals {
        match current {
            Some((cs, ce)) if s <= ce + 1 => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs + 1;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs + 1;
    }
    total
}

pub fn stats(trace: &[TraceRecord]) -> Stats {
    let Some(last) = trace.last() else {
        let mut empty = Stats::default();
        empty.timing_checks.pass = true;
        return empty;
    };
    let total = last.cycle + 1;
    let mut st = Stats {
        total_cycles: total,
        events: trace.len() as u64,
        value_stage_outside_cycle_model: true,
        ..Stats::default()
    };

    let intervals = state_intervals(trace, total);
    for (s, e, name) in &intervals {
        let entry = st.states.entry(name.clone()).or_default();
        entry.cycles += e - s;
        entry.visits += 1;
    }
    st.value_stage_cycles = st.states.get(VALUE_STATE).map_or(0, |s| s.cycles);

    let spans = spans(trace);
    for m in ModuleId::ALL.into_iter().filter(|&m| m != ModuleId::Ctrl) {
        let mine: Vec<&Span> = spans.iter().filter(|s| s.module == m).collect();
        let busy = union_length(mine.iter().map(|s| (s.start, s.end)).collect());
        st.modules.insert(
            m.name().to_string(),
            ModuleStats {
                busy_cycles: busy,
                utilization: busy as f64 / total as f64,
                operations: mine.len() as u64,
            },
        );
    }

    let starts: Vec<u64> = intervals.iter().map(|i| i.0).collect();
    let mut by_state: BTreeMap<(String, String), Vec<(u64, u64)>> = BTreeMap::new();
    for sp in &spans {
        let op = st
            .operations
            .entry(format!("{}/{}", sp.module, sp.label))
            .or_default();
        op.min_span = if op.count == 0 {
            sp.len()
        } else {
            op.min_span.min(sp.len())
        };
        op.max_span = op.max_span.max(sp.len());
        op.total_span += sp.len();
        op.count += 1;

        let idx = starts.partition_point(|&s| s <= sp.start);
        let state = if idx == 0 {
            "none".to_string()
        } else {
            intervals[idx - 1].2.clone()
        };
        by_state
            .entry((state, sp.module.name().to_string()))
            .or_default()
            .push((sp.start, sp.end));

        if sp.module == ModuleId::InputProcess {
            if sp.label.starts_with("cim.") {
                st.timing_checks.cim_ops += 1;
                st.timing_checks.cim_ops_at_64 += (sp.len() == NOMINAL_CIM_CYCLES) as u64;
            } else if sp.label.starts_with("write.") {
                st.timing_checks.column_writes += 1;
                st.timing_checks.column_writes_at_128 +=
                    (sp.len() == NOMINAL_COLUMN_WRITE_CYCLES) as u64;
            }
        }
    }
    for ((state, module), iv) in by_state {
        st.module_busy_by_state
            .entry(state)
            .or_default()
            .insert(module, union_length(iv));
    }
    let pc = &mut st.timing_checks;
    pc.pass = pc.cim_ops == pc.cim_ops_at_64 && pc.column_writes == pc.column_writes_at_128;
    st
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cycle: u64, module: ModuleId, event: &str) -> TraceRecord {
        TraceRecord {
            cycle,
            module,
            event: event.into(),
            digest: 0,
        }
    }

    #[test]
    fn empty_trace() {
        let s = stats(&[]);
        assert_eq!(s.total_cycles, 0);
        assert!(s.states.is_empty());
        assert!(s.timing_checks.pass);
        assert_eq!(s.timing_checks.cim_ops, 0);
    }

    #[test]
    fn states_sum_to_total() {
        use ModuleId::*;
        let t = vec![
            rec(0, Ctrl, "enter:S0_0"),
            rec(1, InputProcess, "start:write.q"),
            rec(128, InputProcess, "done:write.q"),
            rec(129, Ctrl, "enter:S1"),
            rec(130, Dma, "start:ip_to_score"),
            rec(131, Dma, "start:score_to_softmax"),
            rec(132, Dma, "done:ip_to_score"),
            rec(135, Dma, "done:score_to_softmax"),
            rec(140, Ctrl, "halt"),
        ];
        let s = stats(&t);
        assert_eq!(s.total_cycles, 141);
        assert_eq!(s.states["S0_0"].cycles, 129);
        assert_eq!(s.states["S1"].cycles, 11);
        assert_eq!(s.states[HALT_STATE].cycles, 1);
        assert_eq!(s.states.values().map(|v| v.cycles).sum::<u64>(), 141);
        assert_eq!(s.modules["input_process"].busy_cycles, 128);
        assert_eq!(s.modules["dma"].busy_cycles, 6);
        assert_eq!(s.modules["dma"].operations, 2);
        assert_eq!(s.timing_checks.column_writes_at_128, 1);
        assert!(s.timing_checks.pass);
        assert_eq!(s.module_busy_by_state["S1"]["dma"], 6);
        for m in s.modules.values() {
            assert!((0.0..=1.0).contains(&m.utilization));
        }
    }

    #[test]
    fn union() {
        assert_eq!(union_length(vec![(0, 3), (2, 5), (10, 10)]), 7);
        assert_eq!(union_length(vec![]), 0);
    }
}
