use attnlego_core::controller::{ModuleId, TraceRecord};

/// Post-conditions on a finished trace: every enable is answered by exactly
/// one done of the target before the next state change, no unit gets a
/// second enable while busy, and no compute module acts during S1/S3.
pub fn check_fsm_properties(trace: &[TraceRecord]) -> Result<(), String> {
    let mut pending: Vec<(String, String)> = Vec::new();
    let mut state = String::new();
    for r in trace {
        match r.module {
            ModuleId::Ctrl => {
                if let Some(rest) = r.event.strip_prefix("enable:") {
                    let (m, op) = rest
                        .split_once('/')
                        .ok_or(format!("bad enable `{}`", r.event))?;
                    if pending
                        .iter()
                        .any(|(pm, pop)| pm == m && (m != "dma" || pop == op))
                    {
                        return Err(format!("enable of busy {m} at cycle {}", r.cycle));
                    }
                    pending.push((m.to_string(), op.to_string()));
                } else {
                    if !pending.is_empty() {
                        return Err(format!(
                            "state change at cycle {} with {pending:?} open",
                            r.cycle
                        ));
                    }
                    state = r.event.clone();
                }
            }
            m => {
                if matches!(state.as_str(), "enter:S1" | "enter:S3") && m != ModuleId::Dma {
                    return Err(format!("{m} active during {state} at cycle {}", r.cycle));
                }
                if let Some(op) = r.event.strip_prefix("done:") {
                    let i = pending
                        .iter()
                        .position(|(pm, pop)| pm == m.name() && pop == op)
                        .ok_or(format!(
                            "done:{op} of {m} without enable at cycle {}",
                            r.cycle
                        ))?;
                    pending.remove(i);
                }
            }
        }
    }
    if !pending.is_empty() {
        return Err(format!("unanswered enables {pending:?}"));
    }
    match trace.last() {
        Some(r) if r.event == "halt" => Ok(()),
        _ => Err("trace does not end in halt".into()),
    }
}
